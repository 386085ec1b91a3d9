//! Finite-difference audit of every differentiable primitive and of both
//! training losses on a micro-batch.
//!
//! cargo run --release --example gradcheck

use spatialoc::diffcore::GradCheckOptions;
use spatialoc::harness::checks::{coarse_loss_check, fine_loss_check, primitive_checks, LOSS_TOL, PRIMITIVE_TOL};

fn main() -> spatialoc::Result<()> {
    let mut worst: (f64, String) = (0.0, String::new());
    for (name, report) in primitive_checks(0)? {
        let e = report.max_rel_err();
        println!("{name:<24} {e:.2e} {}", if report.passed() { "ok" } else { "FAIL" });
        if e > worst.0 {
            worst = (e, name);
        }
    }
    println!("worst primitive: {} at {:.2e} (tolerance {PRIMITIVE_TOL:.0e})\n", worst.1, worst.0);

    let coarse = coarse_loss_check(0, GradCheckOptions::default())?;
    println!("coarse loss, per parameter (tolerance {LOSS_TOL:.0e}):\n{}", coarse.table());
    let fine = fine_loss_check(0, GradCheckOptions::default())?;
    println!("fine loss, per parameter:\n{}", fine.table());
    Ok(())
}
