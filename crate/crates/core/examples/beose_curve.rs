//! Bézier modulation of edge features: the quadratic curve itself, then a
//! randomly initialized two-layer stack fed with huge inputs to show that
//! every output stays strictly inside (−1, 1).
//!
//! cargo run --release --example beose_curve

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use spatialoc::diffcore::{Graph, ParameterStore, Tensor};
use spatialoc::instalign::{self, bezier, EdgeGraph, InstanceDims, Modality};

fn main() -> spatialoc::Result<()> {
    let (a, b, c) = (0.2, 1.0, -0.4);
    println!("curve through control points {a}, {b}, {c}:");
    for i in 0..=4 {
        let tau = i as f64 / 4.0;
        println!("  tau={tau:.2} -> {:+.4}", bezier(a, b, c, tau));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = InstanceDims { feat: 8, edge: 16, geo: 4, beose_iters: 2 };
    let mut store = ParameterStore::new();
    instalign::init_instalign(&mut store, "ia", dims, &mut rng)?;

    let nodes = 5;
    for scale in [1.0, 10.0, 1000.0] {
        let data: Vec<f64> = (0..nodes * nodes * dims.edge)
            .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z })
            .collect();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let edges = g.constant(Tensor::new(vec![nodes * nodes, dims.edge], data)?);
        let out = instalign::beose(&mut g, &p, "ia", EdgeGraph { edges, nodes, modality: Modality::Point }, 2)?;
        let v = g.value(out.edges);
        let (lo, hi) = v.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        println!("inputs x{scale:<6}: outputs in [{lo:+.6}, {hi:+.6}]");
    }
    Ok(())
}
