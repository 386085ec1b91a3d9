use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::diffcore::{Bound, Graph, Noise, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::finestage;
use crate::frontends::{self, Vocab};
use crate::globalalign::{self, CoarseOptions, CoarseSample, GlobalDims};
use crate::instalign::{self, InstanceDims, InstanceOptions};
use crate::scenegen::{Query, SceneSubmap};

pub const FRONTEND: &str = "fe";
pub const INSTANCE: &str = "ia";
pub const GLOBAL: &str = "ga";
pub const FINE: &str = "fs";

const CHECKPOINT_FORMAT: u32 = 1;

/// Mean per-term coarse loss over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseEpoch {
    pub epoch: usize,
    pub total: f64,
    pub global: f64,
    pub spatial: f64,
    pub instance: f64,
}

/// Mean fine loss and L1 position error over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub l1: f64,
}

/// Parameters of both stages together with the run that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub params: ParameterStore,
    pub coarse_log: Vec<CoarseEpoch>,
    pub fine_log: Vec<FineEpoch>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: u32,
    config_hash: String,
    config: RunConfig,
    vocab: Vec<String>,
    params: ParameterStore,
    coarse_log: Vec<CoarseEpoch>,
    fine_log: Vec<FineEpoch>,
}

impl Model {
    /// Freshly initialized parameters for every stage, seeded by
    /// `config.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let vocab = Vocab::template();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterStore::new();
        frontends::init_frontends(&mut params, FRONTEND, &vocab, m.feat_width, &mut rng)?;
        instalign::init_instalign(
            &mut params,
            INSTANCE,
            InstanceDims {
                feat: m.feat_width,
                edge: m.edge_width,
                geo: m.geo_width,
                beose_iters: m.beose_iters,
            },
            &mut rng,
        )?;
        globalalign::init_globalalign(&mut params, GLOBAL, global_dims(config), &mut rng)?;
        finestage::init_finestage(&mut params, FINE, m.feat_width, m.fine_hidden, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            vocab,
            params,
            coarse_log: Vec::new(),
            fine_log: Vec::new(),
        })
    }

    pub fn coarse_options(&self) -> CoarseOptions {
        let m = &self.config.model;
        let t = &self.config.toggles;
        CoarseOptions {
            use_fae: t.fae,
            instance: InstanceOptions {
                beose_iters: m.beose_iters,
                use_beose: t.beose,
                use_ga: t.ga,
            },
            global_term: t.loss_global,
            spatial_term: t.loss_spatial,
            instance_term: t.loss_instance,
            gamma: m.gamma,
            mode: m.align_mode,
            seq_len: m.seq_len,
        }
    }

    /// JSON checkpoint with parameters, vocabulary, config and its hash.
    /// Optimizer state is not stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = self.params.clone();
        params.reset_optimizer();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            params,
            coarse_log: self.coarse_log.clone(),
            fine_log: self.fine_log.clone(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::Data(format!("{}: not a checkpoint: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Version { found: ck.format, expected: CHECKPOINT_FORMAT });
        }
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Data(format!("{}: config hash mismatch", path.display())));
        }
        let mut params = ck.params;
        params.reset_optimizer();
        Ok(Self {
            config: ck.config,
            vocab: Vocab::new(ck.vocab)?,
            params,
            coarse_log: ck.coarse_log,
            fine_log: ck.fine_log,
        })
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }
}

pub fn global_dims(config: &RunConfig) -> GlobalDims {
    let m = &config.model;
    // The global encoders read instance-level views, which are edge-wide.
    GlobalDims {
        feat: m.edge_width,
        hidden: m.global_hidden,
        out: m.global_width,
        seq_len: m.seq_len,
    }
}

/// Copy of `submap` with instances in canonical order.
pub fn canonical(submap: &SceneSubmap) -> SceneSubmap {
    let instances = submap.canonical_order().into_iter().map(|i| submap.instances[i].clone()).collect();
    SceneSubmap { instances, ..submap.clone() }
}

/// A canonical submap with its flattened offsets.
#[derive(Clone, Debug)]
pub struct PreparedSubmap {
    pub submap: SceneSubmap,
    pub offsets: Tensor,
}

pub fn prepare(submaps: &[SceneSubmap]) -> Result<Vec<PreparedSubmap>> {
    submaps
        .iter()
        .map(|s| {
            let submap = canonical(s);
            let offsets = instalign::build_offset_tensor(&submap)?.edge_rows();
            Ok(PreparedSubmap { submap, offsets })
        })
        .collect()
}

/// Encodes one (submap, query) pair for the coarse loss.
pub fn coarse_sample(g: &mut Graph, p: &Bound, vocab: &Vocab, submap: &PreparedSubmap, query: &Query) -> Result<CoarseSample> {
    let objects = frontends::encode_objects(g, p, FRONTEND, &submap.submap)?.features;
    let text = frontends::encode_text(g, p, FRONTEND, vocab, query)?.features;
    let offsets = g.constant(submap.offsets.clone());
    Ok(CoarseSample { objects, offsets, text })
}

/// Point descriptor of a submap, with the Gaussian aggregation frozen at
/// its mean.
pub fn point_descriptor(model: &Model, submap: &PreparedSubmap) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let opts = model.coarse_options();
    let objects = frontends::encode_objects(&mut g, &p, FRONTEND, &submap.submap)?.features;
    let offsets = g.constant(submap.offsets.clone());
    let views = instalign::point_views(&mut g, &p, INSTANCE, objects, offsets, opts.instance, &mut Noise::Zero)?;
    let r = views.aligned(&mut g)?;
    let d = globalalign::fae_encode(&mut g, &p, GLOBAL, r, opts.seq_len, opts.use_fae)?;
    Ok(g.value(d).data().to_vec())
}

/// Text descriptor of a query.
pub fn text_descriptor(model: &Model, query: &Query) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let opts = model.coarse_options();
    let text = frontends::encode_text(&mut g, &p, FRONTEND, &model.vocab, query)?.features;
    let views = instalign::text_views(&mut g, &p, INSTANCE, text, opts.instance, &mut Noise::Zero)?;
    let t = views.aligned(&mut g)?;
    let d = globalalign::text_global_encode(&mut g, &p, GLOBAL, t)?;
    Ok(g.value(d).data().to_vec())
}

/// Fine-stage forward pass on a batch of (query, submap) pairs; returns
/// predicted positions `[B, 2]` and precisions `[B, 1]` if enabled.
pub fn fine_forward(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    pairs: &[(&Query, &PreparedSubmap)],
) -> Result<finestage::LocalizationPrediction> {
    let mut fused: Vec<Var> = Vec::with_capacity(pairs.len());
    let mut centers = Vec::with_capacity(pairs.len() * 2);
    let mut half = Vec::with_capacity(pairs.len());
    for (q, s) in pairs {
        let text = frontends::encode_text(g, p, FRONTEND, &model.vocab, q)?.features;
        let objects = frontends::encode_objects(g, p, FRONTEND, &s.submap)?.features;
        fused.push(finestage::fuse(g, p, FINE, text, objects)?);
        centers.extend_from_slice(&s.submap.center);
        half.push(s.submap.extent / 2.0);
    }
    let f = g.concat_rows(&fused)?;
    let n = pairs.len();
    finestage::predict(
        g,
        p,
        FINE,
        f,
        Tensor::new(vec![n, 2], centers)?,
        Tensor::new(vec![n, 1], half)?,
        model.config.toggles.fine_lambda,
    )
}
