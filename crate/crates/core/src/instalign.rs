//! Instance-level spatial alignment.
//!
//! Pairwise edges between the instances of a submap (or the sentences of a
//! query) are fused from node features and centroid offsets, reshaped by
//! repeated quadratic Bézier modulation bounded with `tanh`, and compressed
//! back to one descriptor per node by Gaussian aggregation. Descriptor sets
//! of both modalities are then aligned with a set-to-set contrastive loss.
//!
//! Edge tensors are stored flat as `[N·N, D]`, row `m·N + n` holding edge
//! `(m, n)`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{nn, Bound, Graph, Noise, ParameterStore, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::scenegen::SceneSubmap;

/// Clamp applied inside the literal loss' logarithm.
pub const LITERAL_CLAMP: f64 = 1e-6;

/// Pairwise centroid differences, `O[m][n] = c_m − c_n`, shape `[N, N, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetTensor {
    offsets: Tensor,
}

impl OffsetTensor {
    pub fn nodes(&self) -> usize {
        self.offsets.shape()[0]
    }

    pub fn get(&self, m: usize, n: usize) -> [f64; 3] {
        let k = self.nodes();
        let base = (m * k + n) * 3;
        let d = self.offsets.data();
        [d[base], d[base + 1], d[base + 2]]
    }

    /// Flat `[N·N, 3]` view.
    pub fn edge_rows(&self) -> Tensor {
        let n = self.nodes();
        self.offsets.clone().reshaped(vec![n * n, 3]).expect("same size")
    }
}

pub fn build_offset_tensor(submap: &SceneSubmap) -> Result<OffsetTensor> {
    let n = submap.instances.len();
    if n < 2 {
        return Err(Error::TooFewInstances(n));
    }
    let mut data = Vec::with_capacity(n * n * 3);
    for a in &submap.instances {
        for b in &submap.instances {
            data.extend((0..3).map(|i| a.centroid[i] - b.centroid[i]));
        }
    }
    Ok(OffsetTensor {
        offsets: Tensor::new(vec![n, n, 3], data)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Point,
    Text,
}

/// Directed edge features `[N·N, D_e]` over `nodes` nodes.
#[derive(Clone, Copy, Debug)]
pub struct EdgeGraph {
    pub edges: Var,
    pub nodes: usize,
    pub modality: Modality,
}

/// How the alignment loss turns set similarities into a loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Bidirectional contrastive loss, `−(1/B) Σ_b [log p_bb^{X→Y} + log p_bb^{Y→X}]`.
    #[default]
    Corrected,
    /// `−(1/B) Σ_b log(1 − S_b)` with the argument clamped at [`LITERAL_CLAMP`].
    Literal,
}

/// Widths of the instance-level layers.
#[derive(Clone, Copy, Debug)]
pub struct InstanceDims {
    pub feat: usize,
    pub edge: usize,
    pub geo: usize,
    pub beose_iters: usize,
}

pub fn init_instalign(store: &mut ParameterStore, prefix: &str, dims: InstanceDims, rng: &mut impl Rng) -> Result<()> {
    let InstanceDims { feat, edge, geo, beose_iters } = dims;
    nn::init_linear(store, &format!("{prefix}.geo1"), 3, geo, rng)?;
    nn::init_linear(store, &format!("{prefix}.geo2"), geo, geo, rng)?;
    nn::init_linear(store, &format!("{prefix}.fuse1"), 2 * feat + geo, edge, rng)?;
    nn::init_linear(store, &format!("{prefix}.fuse2"), edge, edge, rng)?;
    nn::init_linear(store, &format!("{prefix}.fuse_t1"), 2 * feat, edge, rng)?;
    nn::init_linear(store, &format!("{prefix}.fuse_t2"), edge, edge, rng)?;
    for k in 0..beose_iters {
        let b = format!("{prefix}.beose{k}");
        nn::init_lstm(store, &format!("{b}.cell"), edge, edge, rng)?;
        nn::init_linear(store, &format!("{b}.phi0"), edge, edge, rng)?;
        nn::init_linear(store, &format!("{b}.phi2"), edge, edge, rng)?;
        nn::init_linear(store, &format!("{b}.phic"), edge, edge, rng)?;
        store.insert(format!("{b}.tau"), Tensor::scalar(0.0))?;
    }
    nn::init_linear(store, &format!("{prefix}.ga_mu"), edge, edge, rng)?;
    nn::init_linear(store, &format!("{prefix}.ga_logvar"), edge, edge, rng)?;
    store.insert_glorot(format!("{prefix}.proj_v"), feat, edge, rng)?;
    store.insert_glorot(format!("{prefix}.proj_t"), feat, edge, rng)
}

fn pair_indices(n: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let first = (0..n * n).map(|i| i / n).collect();
    let second = (0..n * n).map(|i| i % n).collect();
    (Arc::new(first), Arc::new(second))
}

fn mlp2(g: &mut Graph, p: &Bound, first: &str, second: &str, x: Var) -> Result<Var> {
    let h = nn::linear(g, p, first, x)?;
    let h = g.relu(h);
    nn::linear(g, p, second, h)
}

/// Edge fusion.
///
/// With offsets (`[N·N, 3]`): `E[m][n] = MLP_fuse([v_m ; v_n ; MLP_geo(O[m][n])])`.
/// Without: `E[m][n] = MLP_fuse_t([t_m ; t_n])`.
pub fn fuse_edges(g: &mut Graph, p: &Bound, prefix: &str, features: Var, offsets: Option<Var>) -> Result<EdgeGraph> {
    let (n, _) = g.value(features).dims2()?;
    contract!(n >= 1, "fuse_edges needs at least one node");
    let (first, second) = pair_indices(n);
    let a = g.gather_rows(features, first)?;
    let b = g.gather_rows(features, second)?;
    match offsets {
        Some(o) => {
            let (rows, w) = g.value(o).dims2()?;
            contract!(rows == n * n && w == 3, "offsets must be [{}, 3], got [{rows}, {w}]", n * n);
            let geo = mlp2(g, p, &format!("{prefix}.geo1"), &format!("{prefix}.geo2"), o)?;
            let cat = g.concat_cols(&[a, b, geo])?;
            let edges = mlp2(g, p, &format!("{prefix}.fuse1"), &format!("{prefix}.fuse2"), cat)?;
            Ok(EdgeGraph { edges, nodes: n, modality: Modality::Point })
        }
        None => {
            let cat = g.concat_cols(&[a, b])?;
            let edges = mlp2(g, p, &format!("{prefix}.fuse_t1"), &format!("{prefix}.fuse_t2"), cat)?;
            Ok(EdgeGraph { edges, nodes: n, modality: Modality::Text })
        }
    }
}

/// `(1−τ)²·a + 2(1−τ)τ·b + τ²·c`.
pub fn bezier(a: f64, b: f64, c: f64, tau: f64) -> f64 {
    let s = 1.0 - tau;
    s * s * a + 2.0 * s * tau * b + tau * tau * c
}

/// Multiplies every entry of `x` by the `[1, 1]` variable `s`.
fn scale_by(g: &mut Graph, x: Var, s: Var) -> Result<Var> {
    let (n, _) = g.value(x).dims2()?;
    let col = g.gather_rows(s, Arc::new(vec![0; n]))?;
    g.mul_col(x, col)
}

/// Quadratic Bézier blend of three control tensors at `tau: [1, 1]`.
pub fn bezier_var(g: &mut Graph, p0: Var, p1: Var, p2: Var, tau: Var) -> Result<Var> {
    let one_minus = g.neg(tau);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let w0 = g.square(one_minus);
    let w1 = g.mul(one_minus, tau)?;
    let w1 = g.scale(w1, 2.0);
    let w2 = g.square(tau);
    let a = scale_by(g, p0, w0)?;
    let b = scale_by(g, p1, w1)?;
    let c = scale_by(g, p2, w2)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Intermediate values of one Bézier modulation layer.
#[derive(Clone, Copy, Debug)]
pub struct BezierControls {
    pub p0: Var,
    pub p1: Var,
    pub p2: Var,
    pub tau: Var,
    /// Curve point before bounding.
    pub modulated: Var,
    /// `tanh` of the curve point.
    pub bounded: Var,
}

/// One Bézier modulation layer. Each edge is a single recurrent step from a
/// zero state; `P0 = φ0(h)`, `P2 = φ2(h)`, `P1 = φc(P0)`. `tau` overrides the
/// learned `sigmoid(τ)` when given.
pub fn beose_layer(g: &mut Graph, p: &Bound, prefix: &str, edges: Var, tau: Option<Var>) -> Result<BezierControls> {
    let h = nn::lstm_step(g, p, &format!("{prefix}.cell"), edges, None)?.h;
    let p0 = nn::linear(g, p, &format!("{prefix}.phi0"), h)?;
    let p2 = nn::linear(g, p, &format!("{prefix}.phi2"), h)?;
    let p1 = nn::linear(g, p, &format!("{prefix}.phic"), p0)?;
    let tau = match tau {
        Some(t) => t,
        None => {
            let logit = p.var(&format!("{prefix}.tau"))?;
            g.sigmoid(logit)
        }
    };
    let modulated = bezier_var(g, p0, p1, p2, tau)?;
    let bounded = g.tanh(modulated);
    Ok(BezierControls { p0, p1, p2, tau, modulated, bounded })
}

/// `iterations` chained modulation layers; every output component lies in
/// `(−1, 1)`.
pub fn beose(g: &mut Graph, p: &Bound, prefix: &str, edges: EdgeGraph, iterations: usize) -> Result<EdgeGraph> {
    if iterations == 0 {
        return Err(Error::Config("BEOSE needs at least one iteration".into()));
    }
    let mut e = edges.edges;
    for k in 0..iterations {
        e = beose_layer(g, p, &format!("{prefix}.beose{k}"), e, None)?.bounded;
    }
    Ok(EdgeGraph { edges: e, ..edges })
}

/// Reparameterized edge latent.
#[derive(Clone, Copy, Debug)]
pub struct GaussianEdgeLatent {
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
}

/// `Z = μ + exp(0.5·log σ²) ⊙ ε`, with `μ` and `log σ²` linear in the edges.
pub fn edge_latent(g: &mut Graph, p: &Bound, prefix: &str, edges: Var, noise: &mut Noise) -> Result<GaussianEdgeLatent> {
    let mu = nn::linear(g, p, &format!("{prefix}.ga_mu"), edges)?;
    let log_var = nn::linear(g, p, &format!("{prefix}.ga_logvar"), edges)?;
    let z = if noise.is_zero() {
        mu
    } else {
        let eps = noise.draw(g.value(mu).shape());
        reparameterize(g, mu, log_var, eps)?
    };
    Ok(GaussianEdgeLatent { mu, log_var, z })
}

/// `μ + exp(0.5·log σ²) ⊙ ε` for an explicit draw `ε`.
pub fn reparameterize(g: &mut Graph, mu: Var, log_var: Var, eps: Tensor) -> Result<Var> {
    let half = g.scale(log_var, 0.5);
    let sigma = g.exp(half);
    let eps = g.constant(eps);
    let spread = g.mul(sigma, eps)?;
    g.add(mu, spread)
}

/// Node descriptors `v̂_m = Σ_n (softmax(Z[m][n]) + softmax(E*[m][n]))`.
///
/// Each softmax normalizes one edge over its feature channels. (A softmax
/// over `n` would sum to one for every channel and make every descriptor
/// the constant 2.)
pub fn gaussian_aggregate(g: &mut Graph, p: &Bound, prefix: &str, edges: EdgeGraph, noise: &mut Noise) -> Result<Var> {
    let latent = edge_latent(g, p, prefix, edges.edges, noise)?;
    aggregate_latent(g, latent.z, edges)
}

/// Aggregation step given a latent `z` aligned with `edges`.
pub fn aggregate_latent(g: &mut Graph, z: Var, edges: EdgeGraph) -> Result<Var> {
    let sz = g.softmax_rows(z)?;
    let se = g.softmax_rows(edges.edges)?;
    let both = g.add(sz, se)?;
    g.group_sum_rows(both, edges.nodes)
}

/// Channelwise max over `n`, the pooling baseline for Gaussian aggregation.
pub fn max_aggregate(g: &mut Graph, edges: EdgeGraph) -> Result<Var> {
    g.group_max_rows(edges.edges, edges.nodes)
}

/// Batch similarity between descriptor sets.
#[derive(Clone, Copy, Debug)]
pub struct SetSimilarity {
    /// `[B, B]`: mean over rows of `X_i` of the best cosine against `Y_j`.
    pub x2y: Var,
    /// `[B, B]`: mean over rows of `Y_i` of the best cosine against `X_j`.
    pub y2x: Var,
}

fn segments(g: &Graph, sets: &[Var]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(sets.len());
    let mut start = 0;
    for &s in sets {
        let (n, _) = g.value(s).dims2()?;
        contract!(n > 0, "empty descriptor set");
        out.push((start, n));
        start += n;
    }
    Ok(out)
}

/// Mean-of-max cosine similarities between every `X_i` and `Y_j`.
pub fn set_similarity(g: &mut Graph, xs: &[Var], ys: &[Var]) -> Result<SetSimilarity> {
    contract!(!xs.is_empty() && xs.len() == ys.len(), "set_similarity needs equal, non-empty batches");
    let x_segs = segments(g, xs)?;
    let y_segs = segments(g, ys)?;
    let x = g.concat_rows(xs)?;
    let y = g.concat_rows(ys)?;
    let xn = g.l2_normalize_rows(x, 1e-12)?;
    let yn = g.l2_normalize_rows(y, 1e-12)?;
    let cos = g.matmul_nt(xn, yn)?;
    let x2y = g.segment_max_mean(cos, Arc::new(x_segs.clone()), &y_segs)?;
    let cos_t = g.transpose(cos)?;
    let y2x = g.segment_max_mean(cos_t, Arc::new(y_segs), &x_segs)?;
    Ok(SetSimilarity { x2y, y2x })
}

/// Row-softmax of `scores / γ`.
pub fn batch_softmax(g: &mut Graph, scores: Var, gamma: f64) -> Result<Var> {
    check_gamma(gamma)?;
    let s = g.scale(scores, 1.0 / gamma);
    g.softmax_rows(s)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {gamma}")))
    }
}

/// Alignment loss between batches of sets; `xs[b]` matches `ys[b]`.
pub fn alignment_loss(g: &mut Graph, xs: &[Var], ys: &[Var], gamma: f64, mode: AlignMode) -> Result<Var> {
    check_gamma(gamma)?;
    let sim = set_similarity(g, xs, ys)?;
    loss_from_scores(g, sim.x2y, sim.y2x, gamma, mode)
}

/// Alignment loss from precomputed `[B, B]` score matrices.
pub fn loss_from_scores(g: &mut Graph, x2y: Var, y2x: Var, gamma: f64, mode: AlignMode) -> Result<Var> {
    check_gamma(gamma)?;
    let b = g.value(x2y).rows() as f64;
    let sx = g.scale(x2y, 1.0 / gamma);
    let sy = g.scale(y2x, 1.0 / gamma);
    match mode {
        AlignMode::Corrected => {
            let lx = g.log_softmax_rows(sx)?;
            let ly = g.log_softmax_rows(sy)?;
            let dx = g.diag(lx)?;
            let dy = g.diag(ly)?;
            let both = g.add(dx, dy)?;
            let total = g.sum(both);
            Ok(g.scale(total, -1.0 / b))
        }
        AlignMode::Literal => {
            let px = g.softmax_rows(sx)?;
            let py = g.softmax_rows(sy)?;
            let dx = g.diag(px)?;
            let dy = g.diag(py)?;
            let s = g.add(dx, dy)?;
            let neg = g.neg(s);
            let one_minus = g.add_scalar(neg, 1.0);
            let clamped = g.clamp_min(one_minus, LITERAL_CLAMP);
            let logs = g.log(clamped);
            let total = g.sum(logs);
            Ok(g.scale(total, -1.0 / b))
        }
    }
}

/// Toggles for the instance branch.
#[derive(Clone, Copy, Debug)]
pub struct InstanceOptions {
    pub beose_iters: usize,
    pub use_beose: bool,
    pub use_ga: bool,
}

/// Per-node spatial descriptors for a feature set, optionally with offsets.
pub fn spatial_descriptors(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    features: Var,
    offsets: Option<Var>,
    opts: InstanceOptions,
    noise: &mut Noise,
) -> Result<Var> {
    let mut edges = fuse_edges(g, p, prefix, features, offsets)?;
    if opts.use_beose {
        edges = beose(g, p, prefix, edges, opts.beose_iters)?;
    }
    if opts.use_ga {
        gaussian_aggregate(g, p, prefix, edges, noise)
    } else {
        max_aggregate(g, edges)
    }
}

/// Instance-level views of one side of a pair: the spatial descriptors and
/// the plain projection of the raw features, both `[N, edge]`.
#[derive(Clone, Copy, Debug)]
pub struct InstanceViews {
    pub spatial: Var,
    pub projected: Var,
}

impl InstanceViews {
    /// `projected + spatial`, the per-instance input of the global encoders.
    pub fn aligned(&self, g: &mut Graph) -> Result<Var> {
        g.add(self.projected, self.spatial)
    }
}

/// Views of a submap's object features; `offsets` is `[N·N, 3]`.
pub fn point_views(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    objects: Var,
    offsets: Var,
    opts: InstanceOptions,
    noise: &mut Noise,
) -> Result<InstanceViews> {
    Ok(InstanceViews {
        spatial: spatial_descriptors(g, p, prefix, objects, Some(offsets), opts, noise)?,
        projected: g.matmul(objects, p.var(&format!("{prefix}.proj_v"))?)?,
    })
}

/// Views of a query's sentence features.
pub fn text_views(g: &mut Graph, p: &Bound, prefix: &str, text: Var, opts: InstanceOptions, noise: &mut Noise) -> Result<InstanceViews> {
    Ok(InstanceViews {
        spatial: spatial_descriptors(g, p, prefix, text, None, opts, noise)?,
        projected: g.matmul(text, p.var(&format!("{prefix}.proj_t"))?)?,
    })
}

/// `(L_IS, L_IO)` over a batch of matched (point, text) views.
pub fn instance_losses(
    g: &mut Graph,
    points: &[InstanceViews],
    texts: &[InstanceViews],
    gamma: f64,
    mode: AlignMode,
) -> Result<(Var, Var)> {
    let v_hat: Vec<Var> = points.iter().map(|v| v.spatial).collect();
    let t_hat: Vec<Var> = texts.iter().map(|v| v.spatial).collect();
    let v_proj: Vec<Var> = points.iter().map(|v| v.projected).collect();
    let t_proj: Vec<Var> = texts.iter().map(|v| v.projected).collect();
    let spatial = alignment_loss(g, &v_hat, &t_hat, gamma, mode)?;
    let instance = alignment_loss(g, &v_proj, &t_proj, gamma, mode)?;
    Ok((spatial, instance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{Color, ObjectClass, ObjectInstance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn submap(points: &[[f64; 3]]) -> SceneSubmap {
        SceneSubmap {
            id: 0,
            center: [0.0, 0.0],
            extent: 30.0,
            instances: points
                .iter()
                .enumerate()
                .map(|(i, &c)| ObjectInstance { id: i as u32, class: ObjectClass::Pole, color: Color::Red, centroid: c })
                .collect(),
        }
    }

    fn dims() -> InstanceDims {
        InstanceDims { feat: 4, edge: 5, geo: 3, beose_iters: 2 }
    }

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        init_instalign(&mut s, "ia", dims(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        s
    }

    #[test]
    fn offsets_definition() {
        let o = build_offset_tensor(&submap(&[[0.0; 3], [3.0, 4.0, 0.0]])).unwrap();
        assert_eq!(o.get(1, 0), [3.0, 4.0, 0.0]);
        assert_eq!(o.get(0, 1), [-3.0, -4.0, 0.0]);
        assert_eq!(o.get(1, 1), [0.0; 3]);
    }

    #[test]
    fn bezier_midpoint() {
        assert!((bezier(0.2, 1.0, -0.4, 0.5) - 0.45).abs() < 1e-15);
        assert_eq!(bezier(0.2, 1.0, -0.4, 0.0), 0.2);
        assert_eq!(bezier(0.2, 1.0, -0.4, 1.0), -0.4);
    }

    #[test]
    fn zero_final_fuse_layer_gives_bias() {
        let mut s = store();
        *s.get_mut("ia.fuse2.w").unwrap() = Tensor::zeros(&[5, 5]);
        *s.get_mut("ia.fuse2.b").unwrap() = Tensor::row(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let sm = submap(&[[0.0; 3], [3.0, 4.0, 0.0], [-1.0, 2.0, 1.0]]);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let v = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
        let o = g.constant(build_offset_tensor(&sm).unwrap().edge_rows());
        let e = fuse_edges(&mut g, &p, "ia", v, Some(o)).unwrap();
        for r in 0..9 {
            assert_eq!(g.value(e.edges).row_slice(r), &[0.1, 0.2, 0.3, 0.4, 0.5]);
        }
    }

    #[test]
    fn edges_are_directed() {
        let s = store();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let t = g.constant(Tensor::new(vec![2, 4], vec![0.3, -0.1, 0.8, 0.2, -0.5, 0.4, 0.1, 0.9]).unwrap());
        let e = fuse_edges(&mut g, &p, "ia", t, None).unwrap();
        assert_ne!(g.value(e.edges).row_slice(1), g.value(e.edges).row_slice(2));
    }

    #[test]
    fn beose_needs_iterations() {
        let s = store();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let e = g.constant(Tensor::zeros(&[4, 5]));
        let eg = EdgeGraph { edges: e, nodes: 2, modality: Modality::Text };
        assert!(matches!(beose(&mut g, &p, "ia", eg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn reparameterization_values() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::scalar(1.0));
        let lv = g.constant(Tensor::scalar(4f64.ln()));
        let z = reparameterize(&mut g, mu, lv, Tensor::scalar(1.0)).unwrap();
        assert!((g.value(z).item() - 3.0).abs() < 1e-12);
        let z0 = reparameterize(&mut g, mu, lv, Tensor::scalar(0.0)).unwrap();
        assert_eq!(g.value(z0).item(), 1.0);
    }

    #[test]
    fn singleton_aggregate_channels_sum_to_two() {
        let s = store();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let e = g.constant(Tensor::row(&[0.3, -0.2, 0.9, 0.0, 0.1]));
        let eg = EdgeGraph { edges: e, nodes: 1, modality: Modality::Text };
        let d = gaussian_aggregate(&mut g, &p, "ia", eg, &mut Noise::seeded(1)).unwrap();
        let total: f64 = g.value(d).data().iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
    }

    fn unit_sets(g: &mut Graph, rows: &[[f64; 2]]) -> Vec<Var> {
        rows.iter().map(|r| g.constant(Tensor::row(r))).collect()
    }

    #[test]
    fn singleton_batch_softmax_is_one() {
        let mut g = Graph::new();
        let x = unit_sets(&mut g, &[[0.3, 0.7]]);
        let y = unit_sets(&mut g, &[[-1.0, 0.2]]);
        let sim = set_similarity(&mut g, &x, &y).unwrap();
        let p = batch_softmax(&mut g, sim.x2y, 0.1).unwrap();
        assert_eq!(g.value(p).item(), 1.0);
    }

    #[test]
    fn two_by_two_diagonal_probability() {
        let mut g = Graph::new();
        let x = unit_sets(&mut g, &[[1.0, 0.0], [0.0, 1.0]]);
        let y = unit_sets(&mut g, &[[1.0, 0.0], [0.0, 1.0]]);
        let sim = set_similarity(&mut g, &x, &y).unwrap();
        let p = batch_softmax(&mut g, sim.x2y, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(p).at(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.value(p).at(1, 1) - e / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn sharp_temperature_favours_matched_pairs() {
        let mut g = Graph::new();
        let x = unit_sets(&mut g, &[[1.0, 0.0], [0.0, 1.0]]);
        let y = unit_sets(&mut g, &[[1.0, 0.0], [0.0, 1.0]]);
        let sim = set_similarity(&mut g, &x, &y).unwrap();
        let p = batch_softmax(&mut g, sim.x2y, 1e-3).unwrap();
        assert!(g.value(p).at(0, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn corrected_loss_values() {
        let mut g = Graph::new();
        let x = unit_sets(&mut g, &[[0.4, 0.1]]);
        let y = unit_sets(&mut g, &[[0.2, -0.9]]);
        let l = alignment_loss(&mut g, &x, &y, 0.1, AlignMode::Corrected).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let same = unit_sets(&mut g, &[[0.5, 0.5], [0.5, 0.5]]);
        let l = alignment_loss(&mut g, &same, &same, 0.1, AlignMode::Corrected).unwrap();
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn literal_single_pair_hits_clamp() {
        let mut g = Graph::new();
        let x = unit_sets(&mut g, &[[0.4, 0.1]]);
        let y = unit_sets(&mut g, &[[0.2, -0.9]]);
        let l = alignment_loss(&mut g, &x, &y, 0.1, AlignMode::Literal).unwrap();
        assert!((g.value(l).item() + LITERAL_CLAMP.ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_temperature_and_empty_sets() {
        let mut g = Graph::new();
        let x = unit_sets(&mut g, &[[0.4, 0.1]]);
        assert!(matches!(alignment_loss(&mut g, &x, &x, 0.0, AlignMode::Corrected), Err(Error::Config(_))));
        let empty = g.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(set_similarity(&mut g, &[empty], &x), Err(Error::Contract(_))));
    }
}
