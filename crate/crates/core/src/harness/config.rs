use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::instalign::AlignMode;

/// Environment variable overriding the master seed.
pub const SEED_ENV: &str = "SPATIALOC_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

/// Optimizer schedule of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Layer widths and loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Instance and sentence feature width.
    pub feat_width: usize,
    /// Edge feature width.
    pub edge_width: usize,
    /// Hidden width of the offset MLP.
    pub geo_width: usize,
    /// Subspace width of the frequency encoder.
    pub global_hidden: usize,
    /// Global descriptor width.
    pub global_width: usize,
    /// Hidden width of the fine heads.
    pub fine_hidden: usize,
    /// Instance sequence length seen by the frequency encoder.
    pub seq_len: usize,
    pub beose_iters: usize,
    pub gamma: f64,
    pub align_mode: AlignMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_width: 64,
            edge_width: 64,
            geo_width: 32,
            global_hidden: 64,
            global_width: 64,
            fine_hidden: 64,
            seq_len: 10,
            beose_iters: 2,
            gamma: 0.1,
            align_mode: AlignMode::Corrected,
        }
    }
}

/// Module and loss-term switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub beose: bool,
    pub ga: bool,
    pub fae: bool,
    pub loss_global: bool,
    pub loss_spatial: bool,
    pub loss_instance: bool,
    pub fine_lambda: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            beose: true,
            ga: true,
            fae: true,
            loss_global: true,
            loss_spatial: true,
            loss_instance: true,
            fine_lambda: true,
        }
    }
}

/// Everything that determines a training run.
///
/// Config files are TOML with the same keys, e.g.
///
/// ```toml
/// seed = 7
///
/// [coarse]
/// epochs = 20
/// batch_size = 16
/// lr = 0.0005
///
/// [model]
/// feat_width = 32
/// align_mode = "literal"
///
/// [toggles]
/// fae = false
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub coarse: StageConfig,
    pub fine: StageConfig,
    pub model: ModelConfig,
    pub toggles: Toggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Minutes-scale defaults.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            coarse: StageConfig { epochs: 20, batch_size: 16, lr: 5e-4 },
            fine: StageConfig { epochs: 30, batch_size: 16, lr: 3e-4 },
            model: ModelConfig::default(),
            toggles: Toggles::default(),
        }
    }

    /// Long schedule: 20 coarse epochs at batch 64 and lr 5e-4, 100
    /// fine epochs at batch 32 and lr 3e-4, 256-wide descriptors.
    pub fn full_schedule() -> Self {
        Self {
            coarse: StageConfig { epochs: 20, batch_size: 64, lr: 5e-4 },
            fine: StageConfig { epochs: 100, batch_size: 32, lr: 3e-4 },
            model: ModelConfig { global_width: 256, ..ModelConfig::default() },
            ..Self::desk()
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Coarse => &self.coarse,
            Stage::Fine => &self.fine,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let over: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut merged = toml::Table::try_from(Self::desk()).map_err(|e| err(&e))?;
        merge(&mut merged, over);
        let cfg: Self = merged.try_into().map_err(|e| err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Replaces the seed with the value of [`SEED_ENV`] when set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, s) in [("coarse", &self.coarse), ("fine", &self.fine)] {
            if s.epochs == 0 || s.batch_size == 0 {
                return bad(format!("{name}: epochs and batch_size must be positive"));
            }
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return bad(format!("{name}: learning rate must be positive"));
            }
        }
        let m = &self.model;
        let widths = [
            m.feat_width,
            m.edge_width,
            m.geo_width,
            m.global_hidden,
            m.global_width,
            m.fine_hidden,
            m.seq_len,
        ];
        if widths.contains(&0) {
            return bad("model widths and seq_len must be positive".into());
        }
        if !(m.gamma > 0.0 && m.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", m.gamma));
        }
        let t = &self.toggles;
        if t.beose && m.beose_iters == 0 {
            return bad("beose_iters must be at least 1 when BEOSE is enabled".into());
        }
        if !(t.loss_global || t.loss_spatial || t.loss_instance) {
            return bad("at least one coarse loss term must be enabled".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Overlays `over` onto `base`, descending into tables so a section may set
/// only some of its keys.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
