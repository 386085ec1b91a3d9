//! Exact nearest-neighbour retrieval over a gallery of descriptors and
//! recall@k, on hand-made vectors where the answer is known.
//!
//! cargo run --release --example retrieval

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatialoc::retrieval::{recall_at_k, retrieve, Gallery};

fn main() -> spatialoc::Result<()> {
    let gallery = Gallery::new([(1, vec![0.0, 0.0]), (2, vec![3.0, 4.0]), (3, vec![1.0, 0.0])])?;
    let r = retrieve(100, &[0.0, 0.0], &gallery, 2)?;
    println!("nearest to the origin: {:?}", r.topk);

    // Queries are noisy copies of their submap's descriptor; more noise,
    // lower recall.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 16;
    let entries: Vec<(u32, Vec<f64>)> = (0..50).map(|id| (id, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
    let gallery = Gallery::new(entries.clone())?;
    for noise in [0.1, 0.5, 1.0] {
        let mut results = Vec::new();
        let mut truth = HashMap::new();
        for q in 0..500u32 {
            let (id, v) = &entries[q as usize % entries.len()];
            let query: Vec<f64> = v.iter().map(|x| x + noise * rng.random_range(-1.0..1.0)).collect();
            results.push(retrieve(q, &query, &gallery, 5)?);
            truth.insert(q, *id);
        }
        let recall = recall_at_k(&results, &truth, &[1, 3, 5])?;
        println!("noise {noise:.1}: recall@1/3/5 = {:.3}/{:.3}/{:.3}", recall[0], recall[1], recall[2]);
    }
    Ok(())
}
