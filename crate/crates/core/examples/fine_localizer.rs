//! Fine localization inside a submap: the precision-weighted loss and its
//! closed-form optimum, then a small coarse-to-fine run compared with
//! predicting the submap center.
//!
//! cargo run --release --example fine_localizer

use spatialoc::finestage::{descend_precision, uncertainty_value};
use spatialoc::harness::{evaluate, train_coarse, train_fine, RunConfig};
use spatialoc::scenegen::{Corpus, GenConfig, Split};

fn main() -> spatialoc::Result<()> {
    // For a fixed error e the loss λ·e + 1/λ is minimized at λ = 1/√e.
    for e in [0.25, 1.0, 4.0] {
        let (lam, loss) = descend_precision(e, 1.0, 0.05, 4000)?;
        println!("error {e:4}: precision {lam:.5} (1/sqrt(e) = {:.5}), loss {loss:.5} (2 sqrt(e) = {:.5})", 1.0 / e.sqrt(), 2.0 * e.sqrt());
    }
    println!("loss at precision 1 and error 1: {}", uncertainty_value(1.0, 1.0)?);

    let gen = GenConfig { submaps: 20, queries: 200, ..GenConfig::default() };
    let train = Corpus::generate(2, Split::Train, &gen)?;
    let test = Corpus::generate(2, Split::Test, &gen)?;
    let mut cfg = RunConfig::desk();
    cfg.model.feat_width = 32;
    cfg.model.edge_width = 32;
    cfg.model.geo_width = 16;
    cfg.model.global_hidden = 32;
    cfg.model.global_width = 32;
    cfg.model.fine_hidden = 32;
    cfg.coarse.epochs = 5;
    cfg.fine.epochs = 20;

    let coarse = train_coarse(&cfg, &train)?;
    let fine = train_fine(&cfg, &train, &coarse)?;
    for e in fine.fine_log.iter().step_by(5) {
        println!("fine epoch {:2}: loss {:.3}, train L1 {:.2} m", e.epoch, e.loss, e.l1);
    }
    let report = evaluate(&coarse, Some(&fine), &test)?.report;
    println!(
        "held-out mean L1 in the true submap: {:.2} m (center guess {:.2} m)",
        report.fine_l1.unwrap_or(f64::NAN),
        report.center_l1
    );
    if let Some(t) = &report.localization {
        for (eps, row) in t.eps.iter().zip(&t.values) {
            println!("  within {eps:>2} m: k=1 {:.3}  k=5 {:.3}  k=10 {:.3}", row[0], row[1], row[2]);
        }
    }
    Ok(())
}
