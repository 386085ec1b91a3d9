use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{evaluate, MetricsReport, RETRIEVAL_KS};
use super::model::Model;
use super::train::{train_coarse, train_fine};
use crate::error::{Error, Result};
use crate::scenegen::Corpus;

/// One configuration of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Full,
    NoBeose,
    NoFae,
    GaMaxpool,
    /// Coarse loss restricted to the enabled terms.
    Losses { global: bool, spatial: bool, instance: bool },
    /// Fine stage without the precision head.
    FineNoLambda,
}

impl Cell {
    /// The seven non-empty combinations of coarse loss terms.
    pub fn loss_combinations() -> Vec<Cell> {
        (1u8..8)
            .map(|m| Cell::Losses { global: m & 1 != 0, spatial: m & 2 != 0, instance: m & 4 != 0 })
            .collect()
    }

    /// Module removals, the loss combinations and the fine precision head.
    pub fn default_matrix() -> Vec<Cell> {
        let mut v = vec![Cell::Full, Cell::NoBeose, Cell::NoFae, Cell::GaMaxpool];
        v.extend(Self::loss_combinations());
        v.push(Cell::FineNoLambda);
        v
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        let t = &mut c.toggles;
        match self {
            Cell::Full => {}
            Cell::NoBeose => t.beose = false,
            Cell::NoFae => t.fae = false,
            Cell::GaMaxpool => t.ga = false,
            Cell::Losses { global, spatial, instance } => {
                t.loss_global = global;
                t.loss_spatial = spatial;
                t.loss_instance = instance;
            }
            Cell::FineNoLambda => t.fine_lambda = false,
        }
        c
    }

    /// Cells that need a trained fine stage.
    pub fn is_fine(self) -> bool {
        matches!(self, Cell::FineNoLambda)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Full => f.write_str("full"),
            Cell::NoBeose => f.write_str("no_beose"),
            Cell::NoFae => f.write_str("no_fae"),
            Cell::GaMaxpool => f.write_str("ga_maxpool"),
            Cell::FineNoLambda => f.write_str("fine_no_lambda"),
            Cell::Losses { global, spatial, instance } => {
                let parts: Vec<&str> = [(*global, "global"), (*spatial, "is"), (*instance, "io")]
                    .iter()
                    .filter(|(on, _)| *on)
                    .map(|(_, n)| *n)
                    .collect();
                write!(f, "loss_{}", parts.join("+"))
            }
        }
    }
}

impl FromStr for Cell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = Cell::default_matrix();
        all.into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation cell `{s}`")))
    }
}

/// Metrics of one (cell, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub recall: Vec<f64>,
    pub fine_l1: Option<f64>,
    pub center_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub runs: Vec<SeedResult>,
    pub median_recall: Vec<f64>,
    pub median_fine_l1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub base_config_hash: String,
    pub cells: Vec<CellResult>,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell == name)
    }

    /// One row per cell: per-seed recall@1 then the median, plus fine L1
    /// columns when present.
    pub fn csv(&self) -> String {
        let mut s = String::from("cell");
        for seed in &self.seeds {
            let _ = write!(s, ",r1_seed{seed}");
        }
        s.push_str(",r1_median,fine_l1_median\n");
        for c in &self.cells {
            s.push_str(&c.cell);
            for r in &c.runs {
                let _ = write!(s, ",{:.6}", r.recall[0]);
            }
            let _ = write!(s, ",{:.6},", c.median_recall[0]);
            if let Some(l1) = c.median_fine_l1 {
                let _ = write!(s, "{l1:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains and evaluates every cell once per seed. Cells whose coarse
/// configuration coincides reuse the same coarse model; the full cell also
/// trains a fine stage whenever the matrix contains a fine cell.
pub fn ablate(base: &RunConfig, train: &Corpus, test: &Corpus, cells: &[Cell], seeds: &[u64]) -> Result<AblationReport> {
    if cells.is_empty() {
        return Err(Error::Config("empty ablation matrix".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    base.validate()?;
    let any_fine = cells.iter().any(|c| c.is_fine());
    let mut coarse_cache: HashMap<String, Model> = HashMap::new();
    let mut results = Vec::with_capacity(cells.len());
    for &cell in cells {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = cell.apply(base);
            cfg.seed = seed;
            let mut coarse_cfg = cfg.clone();
            coarse_cfg.toggles.fine_lambda = base.toggles.fine_lambda;
            coarse_cfg.fine = base.fine;
            let key = coarse_cfg.hash();
            if !coarse_cache.contains_key(&key) {
                info!("ablation: training coarse `{cell}` seed {seed}");
                coarse_cache.insert(key.clone(), train_coarse(&coarse_cfg, train)?);
            }
            let coarse = &coarse_cache[&key];
            let fine = if cell.is_fine() || (any_fine && cell == Cell::Full) {
                info!("ablation: training fine `{cell}` seed {seed}");
                Some(train_fine(&cfg, train, coarse)?)
            } else {
                None
            };
            let report: MetricsReport = evaluate(coarse, fine.as_ref(), test)?.report;
            runs.push(SeedResult {
                seed,
                recall: report.retrieval.iter().map(|r| r.recall).collect(),
                fine_l1: report.fine_l1,
                center_l1: report.center_l1,
            });
        }
        let median_recall = (0..RETRIEVAL_KS.len())
            .map(|i| median(&runs.iter().map(|r| r.recall[i]).collect::<Vec<_>>()))
            .collect();
        let l1s: Vec<f64> = runs.iter().filter_map(|r| r.fine_l1).collect();
        results.push(CellResult {
            cell: cell.to_string(),
            median_fine_l1: (!l1s.is_empty()).then(|| median(&l1s)),
            median_recall,
            runs,
        });
    }
    Ok(AblationReport {
        ks: RETRIEVAL_KS.to_vec(),
        seeds: seeds.to_vec(),
        base_config_hash: base.hash(),
        cells: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_names_round_trip() {
        let m = Cell::default_matrix();
        assert_eq!(m.len(), 12);
        for c in &m {
            assert_eq!(c.to_string().parse::<Cell>().unwrap(), *c);
        }
        assert_eq!(
            Cell::Losses { global: true, spatial: false, instance: false }.to_string(),
            "loss_global"
        );
        assert!("loss_none".parse::<Cell>().is_err());
    }

    #[test]
    fn cells_change_only_their_toggle() {
        let base = RunConfig::desk();
        assert_eq!(Cell::Full.apply(&base), base);
        assert!(!Cell::GaMaxpool.apply(&base).toggles.ga);
        let all = Cell::Losses { global: true, spatial: true, instance: true };
        assert_eq!(all.apply(&base), base);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), 0.2);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }

    #[test]
    fn empty_matrix_rejected() {
        let c = Corpus::generate(1, crate::scenegen::Split::Train, &crate::scenegen::GenConfig { submaps: 2, queries: 2, ..Default::default() }).unwrap();
        assert!(matches!(ablate(&RunConfig::desk(), &c, &c, &[], &[0]), Err(Error::Config(_))));
    }
}
