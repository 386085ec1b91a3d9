//! Layers assembled from graph primitives: dense layers, scaled
//! dot-product attention and the LSTM cell.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Bound, ParameterStore};
use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Registers `{prefix}.w: [input, output]` and `{prefix}.b: [1, output]`.
pub fn init_linear(
    store: &mut ParameterStore,
    prefix: &str,
    input: usize,
    output: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert_glorot(format!("{prefix}.w"), input, output, rng)?;
    store.insert_zeros(format!("{prefix}.b"), 1, output)
}

/// `x · W + b`.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let xw = g.matmul(x, w)?;
    if p.has(&format!("{prefix}.b")) {
        let b = p.var(&format!("{prefix}.b"))?;
        g.add_row(xw, b)
    } else {
        Ok(xw)
    }
}

/// Row-softmax of `q kᵀ / √d`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let (_, d) = g.value(q).dims2()?;
    let (_, dk) = g.value(k).dims2()?;
    contract!(d == dk, "attention: query width {d} vs key width {dk}");
    let logits = g.matmul_nt(q, k)?;
    let scaled = g.scale(logits, 1.0 / (d.max(1) as f64).sqrt());
    g.softmax_rows(scaled)
}

/// Scaled dot-product attention; every output row is a convex combination
/// of the rows of `v`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (nk, _) = g.value(k).dims2()?;
    let (nv, _) = g.value(v).dims2()?;
    contract!(nk == nv, "attention: {nk} keys but {nv} values");
    let w = attention_weights(g, q, k)?;
    g.matmul(w, v)
}

/// Hidden and cell state of an LSTM.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Registers an LSTM cell: `{prefix}.w: [input, 4H]`, `{prefix}.u: [H, 4H]`,
/// `{prefix}.b: [1, 4H]` with gate order (input, forget, candidate, output).
/// The forget-gate bias starts at 1.
pub fn init_lstm(
    store: &mut ParameterStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let scale_w = (1.0 / input as f64).sqrt();
    let scale_u = (1.0 / hidden as f64).sqrt();
    store.insert_normal(format!("{prefix}.w"), input, 4 * hidden, scale_w, rng)?;
    store.insert_normal(format!("{prefix}.u"), hidden, 4 * hidden, scale_u, rng)?;
    let mut b = vec![0.0; 4 * hidden];
    b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    store.insert(format!("{prefix}.b"), Tensor::new(vec![1, 4 * hidden], b)?)
}

/// One LSTM step on a batch of rows `x: [n, input]`.
///
/// `state = None` means a zero hidden and cell state, in which case the
/// recurrent weights do not contribute.
pub fn lstm_step(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    state: Option<LstmState>,
) -> Result<LstmState> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let (win, four_h) = g.value(w).dims2()?;
    let (n, xin) = g.value(x).dims2()?;
    contract!(xin == win, "lstm `{prefix}`: input width {xin}, weights expect {win}");
    let hidden = four_h / 4;

    let mut gates = g.matmul(x, w)?;
    if let Some(s) = state {
        let u = p.var(&format!("{prefix}.u"))?;
        let (hn, hw) = g.value(s.h).dims2()?;
        contract!(hn == n && hw == hidden, "lstm `{prefix}`: hidden state [{hn},{hw}] vs [{n},{hidden}]");
        let hu = g.matmul(s.h, u)?;
        gates = g.add(gates, hu)?;
    }
    let gates = g.add_row(gates, b)?;

    let i_pre = g.slice_cols(gates, 0, hidden)?;
    let f_pre = g.slice_cols(gates, hidden, hidden)?;
    let c_pre = g.slice_cols(gates, 2 * hidden, hidden)?;
    let o_pre = g.slice_cols(gates, 3 * hidden, hidden)?;
    let i = g.sigmoid(i_pre);
    let o = g.sigmoid(o_pre);
    let cand = g.tanh(c_pre);

    let mut c = g.mul(i, cand)?;
    if let Some(s) = state {
        let f = g.sigmoid(f_pre);
        let fc = g.mul(f, s.c)?;
        c = g.add(c, fc)?;
    }
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Runs the cell over the rows of `xs: [T, input]` from a zero state and
/// returns all hidden states `[T, H]`.
pub fn lstm_sequence(g: &mut Graph, p: &Bound, prefix: &str, xs: Var) -> Result<Var> {
    let (t_len, _) = g.value(xs).dims2()?;
    contract!(t_len > 0, "lstm `{prefix}` over an empty sequence");
    let mut state = None;
    let mut hs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x = g.slice_rows(xs, t, 1)?;
        let s = lstm_step(g, p, prefix, x, state)?;
        hs.push(s.h);
        state = Some(s);
    }
    g.concat_rows(&hs)
}
