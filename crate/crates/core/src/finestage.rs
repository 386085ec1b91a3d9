//! Fine localizer: fuses a query with one candidate submap, regresses a 2D
//! offset from the submap center together with a positive precision, and
//! scores the result against the ground-truth pose.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{nn, Bound, Graph, ParameterStore, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::retrieval::RetrievalResult;

/// Additive floor on the predicted precision.
pub const LAMBDA_MIN: f64 = 1e-3;

/// Number of attention/recurrence blocks in the fusion stack.
pub const FUSION_BLOCKS: usize = 2;

pub fn init_finestage(store: &mut ParameterStore, prefix: &str, feat: usize, hidden: usize, rng: &mut impl Rng) -> Result<()> {
    for b in 0..FUSION_BLOCKS {
        for name in ["q", "k", "v"] {
            store.insert_glorot(format!("{prefix}.blk{b}.{name}"), feat, feat, rng)?;
        }
        nn::init_lstm(store, &format!("{prefix}.blk{b}.cell"), feat, feat, rng)?;
    }
    nn::init_linear(store, &format!("{prefix}.delta1"), feat, hidden, rng)?;
    nn::init_linear(store, &format!("{prefix}.delta2"), hidden, 2, rng)?;
    nn::init_linear(store, &format!("{prefix}.lam1"), feat, hidden, rng)?;
    nn::init_linear(store, &format!("{prefix}.lam2"), hidden, 1, rng)
}

/// Fused feature `[1, D]`.
///
/// Each block lets the sentence rows attend to the object rows, adds the
/// block input, and runs an LSTM over the resulting sequence. The hidden
/// states of the last block are averaged.
pub fn fuse(g: &mut Graph, p: &Bound, prefix: &str, text: Var, objects: Var) -> Result<Var> {
    let (nt, _) = g.value(text).dims2()?;
    let (no, _) = g.value(objects).dims2()?;
    if nt == 0 || no == 0 {
        return Err(Error::EmptyInput("fusion needs non-empty text and object sets".into()));
    }
    let mut x = text;
    for b in 0..FUSION_BLOCKS {
        let q = g.matmul(x, p.var(&format!("{prefix}.blk{b}.q"))?)?;
        let k = g.matmul(objects, p.var(&format!("{prefix}.blk{b}.k"))?)?;
        let v = g.matmul(objects, p.var(&format!("{prefix}.blk{b}.v"))?)?;
        let att = nn::attention(g, q, k, v)?;
        let input = g.add(att, x)?;
        x = nn::lstm_sequence(g, p, &format!("{prefix}.blk{b}.cell"), input)?;
    }
    g.mean_rows(x)
}

/// Batched head outputs; row `b` belongs to sample `b`.
#[derive(Clone, Copy, Debug)]
pub struct LocalizationPrediction {
    /// `[B, 2]` offsets in meters.
    pub delta: Var,
    /// `[B, 1]` precisions, `None` when the precision head is disabled.
    pub lam: Option<Var>,
    /// `[B, 2]` positions, center plus offset.
    pub position: Var,
}

/// Offset and precision heads on fused features `[B, D]`. Offsets are the
/// head output scaled by the half extents `[B, 1]`.
pub fn predict(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    fused: Var,
    centers: Tensor,
    half_extents: Tensor,
    with_lambda: bool,
) -> Result<LocalizationPrediction> {
    let h = nn::linear(g, p, &format!("{prefix}.delta1"), fused)?;
    let h = g.relu(h);
    let raw = nn::linear(g, p, &format!("{prefix}.delta2"), h)?;
    let scale = g.constant(half_extents);
    let delta = g.mul_col(raw, scale)?;
    let c = g.constant(centers);
    let position = g.add(c, delta)?;
    let lam = if with_lambda {
        let h = nn::linear(g, p, &format!("{prefix}.lam1"), fused)?;
        let h = g.relu(h);
        let raw = nn::linear(g, p, &format!("{prefix}.lam2"), h)?;
        let sp = g.softplus(raw);
        Some(g.add_scalar(sp, LAMBDA_MIN))
    } else {
        None
    };
    Ok(LocalizationPrediction { delta, lam, position })
}

/// Mean over the batch of `λ·‖pos − gt‖₁ + 1/λ`; with `lam = None` the
/// precision is fixed at one.
pub fn uncertainty_loss(g: &mut Graph, position: Var, lam: Option<Var>, truth: Tensor) -> Result<Var> {
    let gt = g.constant(truth);
    let diff = g.sub(position, gt)?;
    let abs = g.abs(diff);
    let l1 = g.sum_cols(abs)?;
    let per = match lam {
        Some(lam) => {
            contract!(
                g.value(lam).data().iter().all(|&v| v > 0.0),
                "precision must be positive"
            );
            let weighted = g.mul(l1, lam)?;
            let inv = g.recip(lam);
            g.add(weighted, inv)?
        }
        None => g.add_scalar(l1, 1.0),
    };
    Ok(g.mean(per))
}

/// `λ·e + 1/λ`.
pub fn uncertainty_value(lam: f64, l1_error: f64) -> Result<f64> {
    contract!(lam > 0.0, "precision must be positive, got {lam}");
    Ok(lam * l1_error + 1.0 / lam)
}

/// Plain gradient descent on the precision alone for a fixed L1 error,
/// starting from `lam`. Returns the final precision and loss.
pub fn descend_precision(l1_error: f64, mut lam: f64, lr: f64, steps: usize) -> Result<(f64, f64)> {
    for _ in 0..steps {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::scalar(lam));
        let pos = g.constant(Tensor::row(&[l1_error, 0.0]));
        let loss = uncertainty_loss(&mut g, pos, Some(l), Tensor::row(&[0.0, 0.0]))?;
        let grads = g.backward(loss)?;
        let d = grads.get(l).map(|t| t.item()).unwrap_or(0.0);
        lam = (lam - lr * d).max(LAMBDA_MIN);
    }
    Ok((lam, uncertainty_value(lam, l1_error)?))
}

/// One fine prediction for a (query, candidate submap) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: u32,
    pub submap_id: u32,
    #[serde(rename = "L_pr")]
    pub position: [f64; 2],
    pub lambda: f64,
}

/// Recall grid, `values[i][j]` at `eps[i]` and `ks[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub eps: Vec<f64>,
    pub ks: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl RecallTable {
    pub fn get(&self, eps: f64, k: usize) -> Option<f64> {
        let i = self.eps.iter().position(|&e| e == eps)?;
        let j = self.ks.iter().position(|&x| x == k)?;
        Some(self.values[i][j])
    }
}

/// A query succeeds at `(ε, k)` when any prediction for its first `k`
/// candidates lies within `ε` meters of the true pose.
pub fn localization_recall(
    predictions: &[PredictionRecord],
    truth: &HashMap<u32, [f64; 2]>,
    candidates: &[RetrievalResult],
    eps: &[f64],
    ks: &[usize],
) -> Result<RecallTable> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no queries to score".into()));
    }
    let by_pair: HashMap<(u32, u32), [f64; 2]> =
        predictions.iter().map(|p| ((p.query_id, p.submap_id), p.position)).collect();
    let mut counts = vec![vec![0usize; ks.len()]; eps.len()];
    let max_k = ks.iter().copied().max().unwrap_or(0);
    for c in candidates {
        let gt = truth
            .get(&c.query_id)
            .ok_or_else(|| Error::Data(format!("query {} has no ground-truth pose", c.query_id)))?;
        let mut dists = Vec::with_capacity(max_k);
        for id in c.ids().take(max_k) {
            let p = by_pair
                .get(&(c.query_id, id))
                .ok_or_else(|| Error::Data(format!("no prediction for query {} in submap {id}", c.query_id)))?;
            dists.push((p[0] - gt[0]).hypot(p[1] - gt[1]));
        }
        for (i, &e) in eps.iter().enumerate() {
            for (j, &k) in ks.iter().enumerate() {
                if dists.iter().take(k).any(|&d| d < e) {
                    counts[i][j] += 1;
                }
            }
        }
    }
    let n = candidates.len() as f64;
    Ok(RecallTable {
        eps: eps.to_vec(),
        ks: ks.to_vec(),
        values: counts.into_iter().map(|r| r.into_iter().map(|c| c as f64 / n).collect()).collect(),
    })
}

pub fn write_predictions(path: &Path, predictions: &[PredictionRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
