//! A reduced ablation matrix: module removals and a loss restriction,
//! trained on one city and scored on another, over two seeds.
//!
//! cargo run --release --example ablation

use spatialoc::harness::{ablate, Cell, RunConfig};
use spatialoc::scenegen::{Corpus, GenConfig, Split};

fn main() -> spatialoc::Result<()> {
    let gen = GenConfig { submaps: 15, queries: 150, ..GenConfig::default() };
    let train = Corpus::generate(3, Split::Train, &gen)?;
    let test = Corpus::generate(3, Split::Test, &gen)?;
    let mut cfg = RunConfig::desk();
    cfg.model.feat_width = 16;
    cfg.model.edge_width = 16;
    cfg.model.geo_width = 8;
    cfg.model.global_hidden = 16;
    cfg.model.global_width = 16;
    cfg.model.fine_hidden = 16;
    cfg.coarse.epochs = 6;
    cfg.fine.epochs = 6;

    let cells: Vec<Cell> = ["full", "no_beose", "no_fae", "ga_maxpool", "loss_global", "fine_no_lambda"]
        .iter()
        .map(|s| s.parse())
        .collect::<spatialoc::Result<_>>()?;
    let report = ablate(&cfg, &train, &test, &cells, &[0, 1])?;
    print!("{}", report.csv());
    Ok(())
}
