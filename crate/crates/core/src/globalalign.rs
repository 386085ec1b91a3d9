//! Global-level alignment.
//!
//! Submaps are summarized by a frequency-aware encoder: the instance feature
//! sequence (canonical order, zero padded) is projected into three
//! subspaces, transformed along the sequence axis, split into a real, an
//! imaginary and a high-pass branch, fused by cross-branch attention, added
//! back onto the first projection and read out with two stacked LSTMs. Queries are summarized by attention
//! blocks followed by max pooling.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{dft_var, highpass_mask, idft_real_var, nn, Bound, Graph, Noise, ParameterStore, SpectrumVar, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::instalign::{self, AlignMode, InstanceOptions};

/// Layer widths of the global encoders.
#[derive(Clone, Copy, Debug)]
pub struct GlobalDims {
    /// Instance / sentence feature width.
    pub feat: usize,
    /// Subspace width inside the frequency encoder.
    pub hidden: usize,
    /// Descriptor width.
    pub out: usize,
    /// Fixed sequence length; longer submaps are truncated.
    pub seq_len: usize,
}

pub fn init_globalalign(store: &mut ParameterStore, prefix: &str, dims: GlobalDims, rng: &mut impl Rng) -> Result<()> {
    let GlobalDims { feat, hidden, out, .. } = dims;
    for k in 1..=3 {
        nn::init_linear(store, &format!("{prefix}.fc{k}"), feat, hidden, rng)?;
    }
    for name in ["q", "k", "v"] {
        store.insert_glorot(format!("{prefix}.sa.{name}"), hidden, hidden, rng)?;
    }
    nn::init_lstm(store, &format!("{prefix}.lstm1"), hidden, out, rng)?;
    nn::init_lstm(store, &format!("{prefix}.lstm2"), out, out, rng)?;
    for b in 0..2 {
        store.insert_glorot(format!("{prefix}.text{b}.q"), feat, feat, rng)?;
        store.insert_glorot(format!("{prefix}.text{b}.k"), feat, feat, rng)?;
        store.insert_glorot(format!("{prefix}.text{b}.v"), feat, 2 * feat, rng)?;
    }
    nn::init_linear(store, &format!("{prefix}.text_out"), feat, out, rng)
}

/// The three projected subspaces, each `[T, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct SubspaceTriple {
    pub xi1: Var,
    pub xi2: Var,
    pub xi3: Var,
}

/// Real, imaginary and high-pass branches, each `[T, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct BranchFeatures {
    pub nu1: Var,
    pub nu2: Var,
    pub nu3: Var,
}

/// Zero-pads or truncates `features` to `len` rows.
pub fn pad_sequence(g: &mut Graph, features: Var, len: usize) -> Result<Var> {
    let (n, d) = g.value(features).dims2()?;
    if n == 0 || len == 0 {
        return Err(Error::EmptyInput("empty instance sequence".into()));
    }
    if n >= len {
        return g.slice_rows(features, 0, len);
    }
    let pad = g.constant(Tensor::zeros(&[len - n, d]));
    g.concat_rows(&[features, pad])
}

pub fn subspaces(g: &mut Graph, p: &Bound, prefix: &str, seq: Var) -> Result<SubspaceTriple> {
    Ok(SubspaceTriple {
        xi1: nn::linear(g, p, &format!("{prefix}.fc1"), seq)?,
        xi2: nn::linear(g, p, &format!("{prefix}.fc2"), seq)?,
        xi3: nn::linear(g, p, &format!("{prefix}.fc3"), seq)?,
    })
}

/// Spectrum with every bin below the high-pass cut zeroed.
pub fn highpass(g: &mut Graph, z: SpectrumVar) -> Result<SpectrumVar> {
    let t_len = g.value(z.real).rows();
    let mask = g.constant(highpass_mask(t_len));
    Ok(SpectrumVar {
        real: g.mul_col(z.real, mask)?,
        imag: g.mul_col(z.imag, mask)?,
    })
}

pub fn branches(g: &mut Graph, xi: SubspaceTriple) -> Result<BranchFeatures> {
    let z1 = dft_var(g, xi.xi1)?;
    let z2 = dft_var(g, xi.xi2)?;
    let z3 = dft_var(g, xi.xi3)?;
    let kept = highpass(g, z3)?;
    Ok(BranchFeatures {
        nu1: z1.real,
        nu2: z2.imag,
        nu3: idft_real_var(g, kept)?,
    })
}

/// Residual self-attention, `x + attn(x)`. The high-pass branch has zero
/// mean along the sequence, so a plain attention average of it starts out
/// near zero.
fn self_attend(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let q = g.matmul(x, p.var(&format!("{prefix}.sa.q"))?)?;
    let k = g.matmul(x, p.var(&format!("{prefix}.sa.k"))?)?;
    let v = g.matmul(x, p.var(&format!("{prefix}.sa.v"))?)?;
    let a = nn::attention(g, q, k, v)?;
    g.add(x, a)
}

/// Cross-branch fusion: high-pass queries attend to the real and imaginary
/// branches, the two weight maps are multiplied and row-renormalized, and
/// the high-pass rows are mixed with the result.
pub fn fuse_branches(g: &mut Graph, p: &Bound, prefix: &str, nu: BranchFeatures) -> Result<Var> {
    let a1 = self_attend(g, p, prefix, nu.nu1)?;
    let a2 = self_attend(g, p, prefix, nu.nu2)?;
    let a3 = self_attend(g, p, prefix, nu.nu3)?;
    let w1 = nn::attention_weights(g, a3, a1)?;
    let w2 = nn::attention_weights(g, a3, a2)?;
    let prod = g.mul(w1, w2)?;
    let comb = g.normalize_row_sum(prod)?;
    g.matmul(comb, a3)
}

fn read_out(g: &mut Graph, p: &Bound, prefix: &str, seq: Var) -> Result<Var> {
    let h1 = nn::lstm_sequence(g, p, &format!("{prefix}.lstm1"), seq)?;
    let h2 = nn::lstm_sequence(g, p, &format!("{prefix}.lstm2"), h1)?;
    let last = g.value(h2).rows() - 1;
    let h = g.slice_rows(h2, last, 1)?;
    g.l2_normalize_rows(h, 1e-12)
}

/// Point descriptor `[1, out]` from instance features already in canonical
/// order. The recurrent read-out sees `ξ1 + κ`; with `use_fae = false` it
/// sees `ξ1` alone.
pub fn fae_encode(g: &mut Graph, p: &Bound, prefix: &str, features: Var, seq_len: usize, use_fae: bool) -> Result<Var> {
    let seq = pad_sequence(g, features, seq_len)?;
    if !use_fae {
        let xi1 = nn::linear(g, p, &format!("{prefix}.fc1"), seq)?;
        return read_out(g, p, prefix, xi1);
    }
    let xi = subspaces(g, p, prefix, seq)?;
    let nu = branches(g, xi)?;
    let kappa = fuse_branches(g, p, prefix, nu)?;
    // Skip from the first projection: κ alone is built from the zero-mean
    // high-pass branch and carries no set-level content.
    let mixed = g.add(kappa, xi.xi1)?;
    read_out(g, p, prefix, mixed)
}

/// Text descriptor `[1, out]`.
///
/// Each of two blocks applies self-attention whose values are twice as wide
/// as the input, max-pools adjacent value channels back to the input width
/// and adds the block input. A max over sentences, a linear map and L2
/// normalization follow. Every stage is permutation equivariant and
/// invariant to duplicated sentences.
pub fn text_global_encode(g: &mut Graph, p: &Bound, prefix: &str, text: Var) -> Result<Var> {
    let (n, _) = g.value(text).dims2()?;
    if n == 0 {
        return Err(Error::EmptyInput("query without sentences".into()));
    }
    let mut x = text;
    for b in 0..2 {
        let q = g.matmul(x, p.var(&format!("{prefix}.text{b}.q"))?)?;
        let k = g.matmul(x, p.var(&format!("{prefix}.text{b}.k"))?)?;
        let v = g.matmul(x, p.var(&format!("{prefix}.text{b}.v"))?)?;
        let a = nn::attention(g, q, k, v)?;
        let pooled = g.max_pair_cols(a)?;
        x = g.add(x, pooled)?;
    }
    let m = g.max_rows(x)?;
    let out = nn::linear(g, p, &format!("{prefix}.text_out"), m)?;
    g.l2_normalize_rows(out, 1e-12)
}

/// `[B, B]` cosine matrix between rows of `a` and rows of `b`.
fn cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let an = g.l2_normalize_rows(a, 1e-12)?;
    let bn = g.l2_normalize_rows(b, 1e-12)?;
    g.matmul_nt(an, bn)
}

/// Contrastive loss of a descriptor batch `[B, D]` against itself.
pub fn self_contrast(g: &mut Graph, x: Var, gamma: f64) -> Result<Var> {
    let c = cosine(g, x, x)?;
    instalign::loss_from_scores(g, c, c, gamma, AlignMode::Corrected)
}

/// Cross-modal loss plus the two self terms. `text` and `points` are
/// `[B, D]` with row `b` of each forming a matched pair.
pub fn global_loss(g: &mut Graph, text: Var, points: Var, gamma: f64, mode: AlignMode) -> Result<Var> {
    let (bt, _) = g.value(text).dims2()?;
    let (bp, _) = g.value(points).dims2()?;
    contract!(bt == bp && bt > 0, "global_loss needs equal non-empty batches, got {bt} and {bp}");
    let q2p = cosine(g, text, points)?;
    let p2q = g.transpose(q2p)?;
    let cross = instalign::loss_from_scores(g, q2p, p2q, gamma, mode)?;
    let st = self_contrast(g, text, gamma)?;
    let sp = self_contrast(g, points, gamma)?;
    let s = g.add(cross, st)?;
    g.add(s, sp)
}

/// Module and loss-term toggles of the coarse stage.
#[derive(Clone, Copy, Debug)]
pub struct CoarseOptions {
    pub use_fae: bool,
    pub instance: InstanceOptions,
    pub global_term: bool,
    pub spatial_term: bool,
    pub instance_term: bool,
    pub gamma: f64,
    pub mode: AlignMode,
    pub seq_len: usize,
}

/// One training pair: features of a submap in canonical order, its offsets
/// and the features of a query describing a pose inside it.
#[derive(Clone, Copy, Debug)]
pub struct CoarseSample {
    pub objects: Var,
    pub offsets: Var,
    pub text: Var,
}

/// Per-term values of one coarse loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CoarseTerms {
    pub global: Var,
    pub spatial: Var,
    pub instance: Var,
    pub total: Var,
}

/// Unweighted sum of the enabled terms; disabled terms are exactly zero.
///
/// Both global encoders read the instance-level views (projection plus
/// spatial descriptor), so the object-level modules shape the descriptors
/// even when their own loss terms are off.
pub fn coarse_loss(
    g: &mut Graph,
    p: &Bound,
    prefixes: (&str, &str),
    batch: &[CoarseSample],
    opts: &CoarseOptions,
    noise: &mut Noise,
) -> Result<CoarseTerms> {
    let (ga, ia) = prefixes;
    contract!(!batch.is_empty(), "coarse_loss needs a non-empty batch");
    let mut points = Vec::with_capacity(batch.len());
    let mut texts = Vec::with_capacity(batch.len());
    for s in batch {
        points.push(instalign::point_views(g, p, ia, s.objects, s.offsets, opts.instance, noise)?);
        texts.push(instalign::text_views(g, p, ia, s.text, opts.instance, noise)?);
    }
    let zero = g.constant(Tensor::scalar(0.0));
    let global = if opts.global_term {
        let mut ps = Vec::with_capacity(batch.len());
        let mut qs = Vec::with_capacity(batch.len());
        for (pv, tv) in points.iter().zip(&texts) {
            let r = pv.aligned(g)?;
            ps.push(fae_encode(g, p, ga, r, opts.seq_len, opts.use_fae)?);
            let t = tv.aligned(g)?;
            qs.push(text_global_encode(g, p, ga, t)?);
        }
        let pm = g.concat_rows(&ps)?;
        let qm = g.concat_rows(&qs)?;
        global_loss(g, qm, pm, opts.gamma, opts.mode)?
    } else {
        zero
    };
    let (spatial, instance) = if opts.spatial_term || opts.instance_term {
        let (ls, li) = instalign::instance_losses(g, &points, &texts, opts.gamma, opts.mode)?;
        (if opts.spatial_term { ls } else { zero }, if opts.instance_term { li } else { zero })
    } else {
        (zero, zero)
    };
    let sum = g.add(global, spatial)?;
    let total = g.add(sum, instance)?;
    Ok(CoarseTerms { global, spatial, instance, total })
}

/// Reorders the rows of `features` by `order`.
pub fn reorder(g: &mut Graph, features: Var, order: Vec<usize>) -> Result<Var> {
    g.gather_rows(features, Arc::new(order))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorModality {
    Point,
    Text,
}

/// One row of a descriptor dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalDescriptor {
    pub id: u32,
    pub modality: DescriptorModality,
    pub vector: Vec<f64>,
}

/// JSON array of `{id, modality, vector}`.
pub fn save_descriptors(path: &Path, descriptors: &[GlobalDescriptor]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(descriptors)?)?;
    Ok(())
}

pub fn load_descriptors(path: &Path) -> Result<Vec<GlobalDescriptor>> {
    let d: Vec<GlobalDescriptor> = serde_json::from_slice(&std::fs::read(path)?)?;
    if let Some(first) = d.first() {
        let w = first.vector.len();
        if d.iter().any(|x| x.vector.len() != w || x.vector.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data("descriptor dump has ragged or non-finite vectors".into()));
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::dft;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dims() -> GlobalDims {
        GlobalDims { feat: 4, hidden: 6, out: 5, seq_len: 10 }
    }

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        init_globalalign(&mut s, "ga", dims(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        s
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn constant_sequence_has_no_high_band() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[10, 3], 0.7));
        let nu = branches(&mut g, SubspaceTriple { xi1: c, xi2: c, xi3: c }).unwrap();
        assert!(g.value(nu.nu3).max_abs() < 1e-12);
        assert!(g.value(nu.nu2).max_abs() < 1e-12);
    }

    #[test]
    fn high_band_mirror_identity() {
        // Taking the real part of the masked inverse folds each kept bin onto
        // its mirror: DFT(nu3)[m] = (Z[m] + conj(Z[T-m])) / 2 on the mask.
        for t_len in [4usize, 7, 10, 16] {
            let x = random(t_len, 1, t_len as u64);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let z = dft_var(&mut g, xv).unwrap();
            let kept = highpass(&mut g, z).unwrap();
            let nu3 = idft_real_var(&mut g, kept).unwrap();
            let spec = dft(g.value(nu3).data()).unwrap();
            let full = dft(x.data()).unwrap();
            let masked = |m: usize| if crate::diffcore::highpass_keeps(m, t_len) { 1.0 } else { 0.0 };
            let mut low = 0.0;
            let mut total = 0.0;
            for m in 0..t_len {
                let mirror = (t_len - m) % t_len;
                let re = 0.5 * (masked(m) * full.real.data()[m] + masked(mirror) * full.real.data()[mirror]);
                let im = 0.5 * (masked(m) * full.imag.data()[m] - masked(mirror) * full.imag.data()[mirror]);
                assert!((spec.real.data()[m] - re).abs() < 1e-9);
                assert!((spec.imag.data()[m] - im).abs() < 1e-9);
                let e = spec.real.data()[m].powi(2) + spec.imag.data()[m].powi(2);
                total += e;
                if !crate::diffcore::highpass_keeps(m, t_len) {
                    low += e;
                }
            }
            // Half of the kept energy lands in mirrored low bins.
            if total > 0.0 {
                assert!((low / total - 0.5).abs() < 1e-9, "t={t_len}: {}", low / total);
            }
        }
    }

    #[test]
    fn combined_weights_are_stochastic() {
        let s = store();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let x = g.constant(random(10, 4, 1));
        let xi = subspaces(&mut g, &p, "ga", x).unwrap();
        let nu = branches(&mut g, xi).unwrap();
        let a1 = self_attend(&mut g, &p, "ga", nu.nu1).unwrap();
        let a3 = self_attend(&mut g, &p, "ga", nu.nu3).unwrap();
        let w1 = nn::attention_weights(&mut g, a3, a1).unwrap();
        let prod = g.mul(w1, w1).unwrap();
        let comb = g.normalize_row_sum(prod).unwrap();
        for r in 0..10 {
            let s: f64 = g.value(comb).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn point_descriptor_depends_on_order() {
        let s = store();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let x = g.constant(random(6, 4, 2));
        let a = fae_encode(&mut g, &p, "ga", x, 10, true).unwrap();
        let again = fae_encode(&mut g, &p, "ga", x, 10, true).unwrap();
        assert_eq!(g.value(a), g.value(again));
        let y = reorder(&mut g, x, vec![1, 0, 2, 3, 4, 5]).unwrap();
        let b = fae_encode(&mut g, &p, "ga", y, 10, true).unwrap();
        assert_ne!(g.value(a), g.value(b));
        let norm: f64 = g.value(a).data().iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_eq!(g.value(a).shape(), &[1, 5]);
    }

    #[test]
    fn empty_sequence_rejected() {
        let s = store();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(fae_encode(&mut g, &p, "ga", x, 10, true), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn text_descriptor_set_semantics() {
        let s = store();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let t = random(4, 4, 3);
        let x = g.constant(t.clone());
        let base = text_global_encode(&mut g, &p, "ga", x).unwrap();
        let perm = reorder(&mut g, x, vec![2, 0, 3, 1]).unwrap();
        let permuted = text_global_encode(&mut g, &p, "ga", perm).unwrap();
        let dup = reorder(&mut g, x, vec![0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        let duplicated = text_global_encode(&mut g, &p, "ga", dup).unwrap();
        for (a, b) in g.value(base).data().iter().zip(g.value(permuted).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(base).data().iter().zip(g.value(duplicated).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_self_term() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let l = self_contrast(&mut g, x, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(l).item() - 2.0 * -(e / (e + 1.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_pair_global_loss_is_zero() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(&[0.6, 0.8]));
        let p = g.constant(Tensor::row(&[1.0, 0.0]));
        let l = global_loss(&mut g, q, p, 0.1, AlignMode::Corrected).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn global_loss_falls_with_matched_cosine() {
        let loss = |angle: f64| {
            let mut g = Graph::new();
            let q = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap());
            let p = g.constant(
                Tensor::from_rows(&[vec![angle.cos(), 0.0, angle.sin()], vec![0.0, 0.0, 1.0]]).unwrap(),
            );
            let l = global_loss(&mut g, q, p, 1.0, AlignMode::Corrected).unwrap();
            g.value(l).item()
        };
        assert!(loss(0.2) < loss(0.6));
    }

    #[test]
    fn descriptor_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let d = vec![
            GlobalDescriptor { id: 3, modality: DescriptorModality::Point, vector: vec![0.1, -0.2] },
            GlobalDescriptor { id: 7, modality: DescriptorModality::Text, vector: vec![1.0 / 3.0, 0.0] },
        ];
        save_descriptors(&path, &d).unwrap();
        assert_eq!(load_descriptors(&path).unwrap(), d);
        std::fs::write(&path, r#"[{"id":1,"modality":"point","vector":[1.0]},{"id":2,"modality":"text","vector":[]}]"#).unwrap();
        assert!(matches!(load_descriptors(&path), Err(Error::Data(_))));
    }
}
