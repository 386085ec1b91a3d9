//! Finite-difference suites for every graph primitive and for the two
//! training losses on a micro-batch.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::model::{self, Model, GLOBAL, INSTANCE};
use crate::diffcore::{dft_var, grad_check, idft_real_var, nn, Bound, GradCheckOptions, GradCheckReport, Graph, Noise, ParameterStore, SpectrumVar, Tensor, Var};
use crate::error::Result;
use crate::finestage;
use crate::globalalign;
use crate::scenegen::{Corpus, GenConfig, Split};

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const LOSS_TOL: f64 = 1e-3;

type OpFn = Box<dyn Fn(&mut Graph, &Bound) -> Result<Var>>;

/// Inputs kept away from kinks and ties so that central differences are
/// well defined.
fn spaced(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let n = rows * cols;
    let mut vals: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(vec![rows, cols], vals).expect("sized")
}

fn signed(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = spaced(rng, rows, cols, 0.2, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Projects an op output to a scalar with fixed random weights so the whole
/// Jacobian is exercised.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn unary(f: fn(&mut Graph, Var) -> Var) -> OpFn {
    Box::new(move |g, p| {
        let a = p.var("a")?;
        let y = f(g, a);
        project(g, y, 1)
    })
}

fn fallible(f: fn(&mut Graph, Var) -> Result<Var>) -> OpFn {
    Box::new(move |g, p| {
        let a = p.var("a")?;
        let y = f(g, a)?;
        project(g, y, 1)
    })
}

fn binary(f: fn(&mut Graph, Var, Var) -> Result<Var>) -> OpFn {
    Box::new(move |g, p| {
        let a = p.var("a")?;
        let b = p.var("b")?;
        let y = f(g, a, b)?;
        project(g, y, 2)
    })
}

/// Gradient checks of every primitive, one report per op.
pub fn primitive_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&str, Vec<(&str, Tensor)>, OpFn)> = Vec::new();
    let mut r = |rows, cols| spaced(&mut rng, rows, cols, -2.0, 2.0);
    let (a34, b34, b14, b31, b45, s4) = (r(3, 4), r(3, 4), r(1, 4), r(3, 1), r(4, 5), r(5, 4));
    let (sq, sq2, a64, b64, lstm_x) = (r(3, 3), r(4, 4), r(6, 4), r(6, 4), r(3, 4));
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let pos = spaced(&mut rng2, 3, 4, 0.3, 2.0);
    let sgn = signed(&mut rng2, 3, 4);
    let ab = |a: &Tensor, b: &Tensor| vec![("a", a.clone()), ("b", b.clone())];
    let only = |a: &Tensor| vec![("a", a.clone())];

    cases.push(("add", ab(&a34, &b34), binary(Graph::add)));
    cases.push(("sub", ab(&a34, &b34), binary(Graph::sub)));
    cases.push(("mul", ab(&a34, &b34), binary(Graph::mul)));
    cases.push(("add_row", ab(&a34, &b14), binary(Graph::add_row)));
    cases.push(("mul_row", ab(&a34, &b14), binary(Graph::mul_row)));
    cases.push(("mul_col", ab(&a34, &b31), binary(Graph::mul_col)));
    cases.push(("matmul", ab(&a34, &b45), binary(Graph::matmul)));
    cases.push(("matmul_nt", ab(&a34, &s4), binary(Graph::matmul_nt)));
    cases.push(("scale", only(&a34), unary(|g, a| g.scale(a, -1.7))));
    cases.push(("add_scalar", only(&a34), unary(|g, a| g.add_scalar(a, 0.3))));
    cases.push(("neg", only(&a34), unary(Graph::neg)));
    cases.push(("transpose", only(&a34), fallible(Graph::transpose)));
    cases.push(("tanh", only(&a34), unary(Graph::tanh)));
    cases.push(("sigmoid", only(&a34), unary(Graph::sigmoid)));
    cases.push(("exp", only(&a34), unary(Graph::exp)));
    cases.push(("log", only(&pos), unary(Graph::log)));
    cases.push(("softplus", only(&a34), unary(Graph::softplus)));
    cases.push(("relu", only(&sgn), unary(Graph::relu)));
    cases.push(("abs", only(&sgn), unary(Graph::abs)));
    cases.push(("recip", only(&pos), unary(Graph::recip)));
    cases.push(("square", only(&a34), unary(Graph::square)));
    cases.push(("clamp_min", only(&sgn), unary(|g, a| g.clamp_min(a, 0.1))));
    cases.push(("softmax_rows", only(&a34), fallible(Graph::softmax_rows)));
    cases.push(("log_softmax_rows", only(&a34), fallible(Graph::log_softmax_rows)));
    cases.push(("sum", only(&a34), unary(Graph::sum)));
    cases.push(("mean", only(&a34), unary(Graph::mean)));
    cases.push(("sum_rows", only(&a34), fallible(Graph::sum_rows)));
    cases.push(("mean_rows", only(&a34), fallible(Graph::mean_rows)));
    cases.push(("sum_cols", only(&a34), fallible(Graph::sum_cols)));
    cases.push(("group_sum_rows", only(&a64), fallible(|g, a| g.group_sum_rows(a, 2))));
    cases.push(("group_max_rows", only(&a64), fallible(|g, a| g.group_max_rows(a, 3))));
    cases.push(("max_rows", only(&a34), fallible(Graph::max_rows)));
    cases.push(("max_pair_cols", only(&a34), fallible(Graph::max_pair_cols)));
    cases.push(("concat_cols", ab(&a34, &b31), binary(|g, a, b| g.concat_cols(&[a, b, a]))));
    cases.push(("concat_rows", ab(&a34, &b14), binary(|g, a, b| g.concat_rows(&[a, b]))));
    cases.push(("slice_rows", only(&a64), fallible(|g, a| g.slice_rows(a, 1, 3))));
    cases.push(("slice_cols", only(&a34), fallible(|g, a| g.slice_cols(a, 1, 2))));
    cases.push(("gather_rows", only(&a34), fallible(|g, a| g.gather_rows(a, Arc::new(vec![2, 0, 2, 1])))));
    cases.push(("reshape", only(&a34), fallible(|g, a| g.reshape(a, 2, 6))));
    cases.push(("l2_normalize_rows", only(&a34), fallible(|g, a| g.l2_normalize_rows(a, 1e-12))));
    cases.push(("normalize_row_sum", only(&pos), fallible(Graph::normalize_row_sum)));
    cases.push(("diag", only(&sq), fallible(Graph::diag)));
    cases.push((
        "segment_max_mean",
        only(&a64),
        fallible(|g, a| {
            let c = g.matmul_nt(a, a)?;
            g.segment_max_mean(c, Arc::new(vec![(0, 2), (2, 4)]), &[(0, 3), (3, 3)])
        }),
    ));
    cases.push((
        "dft",
        only(&a64),
        fallible(|g, a| {
            let z = dft_var(g, a)?;
            g.concat_cols(&[z.real, z.imag])
        }),
    ));
    cases.push((
        "idft_real",
        ab(&a64, &b64),
        binary(|g, a, b| idft_real_var(g, SpectrumVar { real: a, imag: b })),
    ));
    cases.push(("attention", ab(&sq2, &s4), binary(|g, a, b| nn::attention(g, a, b, b))));

    let mut out = Vec::with_capacity(cases.len() + 1);
    for (name, inputs, f) in cases {
        let mut store = ParameterStore::new();
        for (n, t) in inputs {
            store.insert(n, t)?;
        }
        out.push((name.to_string(), grad_check(&store, f, PRIMITIVE_TOL, GradCheckOptions::default())?));
    }

    let mut store = ParameterStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    nn::init_lstm(&mut store, "cell", 4, 3, &mut init_rng)?;
    store.insert("x", lstm_x)?;
    let report = grad_check(
        &store,
        |g, p| {
            let x = p.var("x")?;
            let h = nn::lstm_sequence(g, p, "cell", x)?;
            project(g, h, 3)
        },
        PRIMITIVE_TOL,
        GradCheckOptions::default(),
    )?;
    out.push(("lstm".to_string(), report));
    Ok(out)
}

/// Micro configuration: two pairs, three instances, two sentences, width 8.
pub fn micro_setup(seed: u64) -> Result<(Model, Corpus)> {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    let m = &mut cfg.model;
    m.feat_width = 8;
    m.edge_width = 8;
    m.geo_width = 8;
    m.global_hidden = 8;
    m.global_width = 8;
    m.fine_hidden = 8;
    m.seq_len = 3;
    let gen = GenConfig {
        submaps: 2,
        queries: 2,
        instances_min: 3,
        instances_max: 3,
        descriptions_min: 2,
        descriptions_max: 2,
        ..GenConfig::default()
    };
    let mut model = Model::new(&cfg)?;
    // Zero biases put ReLU inputs exactly on the kink wherever an offset is
    // zero (every diagonal edge), where central differences are meaningless.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let biases: Vec<String> = model.params.names().filter(|n| n.ends_with(".b")).map(String::from).collect();
    for name in biases {
        if let Some(t) = model.params.get_mut(&name) {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    Ok((model, Corpus::generate(seed, Split::Train, &gen)?))
}

/// Gradient check of the full coarse loss on the micro-batch.
pub fn coarse_loss_check(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (model, corpus) = micro_setup(seed)?;
    let prepared = model::prepare(&corpus.submaps)?;
    let index = corpus.submap_index();
    let copts = model.coarse_options();
    let coarse_params = subset(&model.params, &["fe.", "ia.", "ga."]);
    grad_check(
        &coarse_params,
        |g, p| {
            let samples = corpus
                .queries
                .iter()
                .map(|q| model::coarse_sample(g, p, &model.vocab, &prepared[index[&q.gt_submap_id]], q))
                .collect::<Result<Vec<_>>>()?;
            let mut noise = Noise::seeded(seed);
            Ok(globalalign::coarse_loss(g, p, (GLOBAL, INSTANCE), &samples, &copts, &mut noise)?.total)
        },
        LOSS_TOL,
        opts,
    )
}

/// Gradient check of the fine regression loss on the micro-batch.
pub fn fine_loss_check(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (model, corpus) = micro_setup(seed)?;
    let prepared = model::prepare(&corpus.submaps)?;
    let index = corpus.submap_index();
    let fine_params = subset(&model.params, &["fe.", "fs."]);
    let truth: Vec<f64> = corpus.queries.iter().flat_map(|q| q.gt_position).collect();
    let truth = Tensor::new(vec![corpus.queries.len(), 2], truth)?;
    let view = Model { params: ParameterStore::new(), ..model };
    grad_check(
        &fine_params,
        |g, p| {
            let pairs: Vec<_> = corpus.queries.iter().map(|q| (q, &prepared[index[&q.gt_submap_id]])).collect();
            let pred = model::fine_forward(g, p, &view, &pairs)?;
            finestage::uncertainty_loss(g, pred.position, pred.lam, truth.clone())
        },
        LOSS_TOL,
        opts,
    )
}

fn subset(store: &ParameterStore, prefixes: &[&str]) -> ParameterStore {
    let mut out = ParameterStore::new();
    for (name, t) in store.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            out.insert(name, t.clone()).expect("unique names");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_primitives_pass() {
        for (name, report) in primitive_checks(3).unwrap().iter().filter(|(n, _)| ["matmul", "softmax_rows", "lstm"].contains(&n.as_str())) {
            assert!(report.passed(), "{name}\n{}", report.table());
        }
    }
}
