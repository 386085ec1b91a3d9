//! Gaussian aggregation of edge features into node descriptors, frozen at
//! the mean and with sampled noise, plus the reparameterization identity
//! checked empirically.
//!
//! cargo run --release --example gaussian_aggregation

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatialoc::diffcore::{Graph, Noise, ParameterStore, Tensor};
use spatialoc::instalign::{self, EdgeGraph, InstanceDims, Modality};

fn main() -> spatialoc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = InstanceDims { feat: 4, edge: 6, geo: 2, beose_iters: 1 };
    let mut store = ParameterStore::new();
    instalign::init_instalign(&mut store, "ia", dims, &mut rng)?;

    let nodes = 3;
    let data: Vec<f64> = (0..nodes * nodes * dims.edge).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let edges_t = Tensor::new(vec![nodes * nodes, dims.edge], data)?;

    for (label, mut noise) in [("frozen", Noise::Zero), ("sampled", Noise::seeded(1))] {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let edges = g.constant(edges_t.clone());
        let v = instalign::gaussian_aggregate(&mut g, &p, "ia", EdgeGraph { edges, nodes, modality: Modality::Point }, &mut noise)?;
        let v = g.value(v);
        println!("{label} node descriptors (each row sums to 2·nodes = {}):", 2 * nodes);
        for r in 0..nodes {
            let row = v.row_slice(r);
            println!("  {} | sum {:.6}", row.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" "), row.iter().sum::<f64>());
        }
    }

    // Mean of many reparameterized draws approaches mu.
    let (mu, log_var, draws) = (0.7, (0.5f64).ln(), 100_000);
    let mut noise = Noise::seeded(11);
    let mut g = Graph::new();
    let m = g.constant(Tensor::full(&[draws, 1], mu));
    let lv = g.constant(Tensor::full(&[draws, 1], log_var));
    let eps = noise.draw(&[draws, 1]);
    let z = instalign::reparameterize(&mut g, m, lv, eps)?;
    let mean = g.value(z).data().iter().sum::<f64>() / draws as f64;
    let sigma = (0.5 * log_var).exp();
    println!("\nmean of {draws} draws: {mean:.5} (mu {mu}, 4 sigma/sqrt(n) = {:.5})", 4.0 * sigma / (draws as f64).sqrt());
    Ok(())
}
