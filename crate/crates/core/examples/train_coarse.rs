//! Trains the coarse stage on a small synthetic city, evaluates submap
//! retrieval on a held-out city and checks that a saved checkpoint
//! evaluates identically.
//!
//! cargo run --release --example train_coarse

use spatialoc::harness::{evaluate, train_coarse, Model, RunConfig};
use spatialoc::scenegen::{Corpus, GenConfig, Split};

fn main() -> spatialoc::Result<()> {
    let gen = GenConfig { submaps: 20, queries: 200, ..GenConfig::default() };
    let train = Corpus::generate(1, Split::Train, &gen)?;
    let test = Corpus::generate(1, Split::Test, &gen)?;

    let mut cfg = RunConfig::desk();
    cfg.model.feat_width = 32;
    cfg.model.edge_width = 32;
    cfg.model.geo_width = 16;
    cfg.model.global_hidden = 32;
    cfg.model.global_width = 32;
    cfg.coarse.epochs = 10;

    let model = train_coarse(&cfg, &train)?;
    for e in &model.coarse_log {
        println!(
            "epoch {:2}: total {:.3} = global {:.3} + spatial {:.3} + instance {:.3}",
            e.epoch, e.total, e.global, e.spatial, e.instance
        );
    }

    let report = evaluate(&model, None, &test)?.report;
    let chance = 1.0 / test.submaps.len() as f64;
    for r in &report.retrieval {
        println!("held-out recall@{} = {:.3}", r.k, r.recall);
    }
    println!("chance level for recall@1 is {chance:.3}");

    let path = std::env::temp_dir().join("spatialoc-coarse-example.json");
    model.save(&path)?;
    let again = evaluate(&Model::load(&path)?, None, &test)?.report;
    assert_eq!(again, report);
    println!("checkpoint {} reproduces the report", path.display());
    Ok(())
}
