//! Builds a synthetic city, prints one submap with a few of its queries,
//! checks every sentence against the relation rules and writes the corpus
//! to disk.
//!
//! cargo run --release --example generate_city [OUT_DIR]

use spatialoc::scenegen::{load_corpus, parse_description, relation_truth, save_corpus, Corpus, GenConfig, Split};

fn main() -> spatialoc::Result<()> {
    let gen = GenConfig { submaps: 8, queries: 40, ..GenConfig::default() };
    let corpus = Corpus::generate(42, Split::Train, &gen)?;
    println!("{} submaps, {} queries, checksum {}", corpus.submaps.len(), corpus.queries.len(), corpus.manifest.checksum);

    let s = &corpus.submaps[0];
    println!("\nsubmap {} centred at ({:.1}, {:.1}), {} m wide:", s.id, s.center[0], s.center[1], s.extent);
    for &i in &s.canonical_order() {
        let o = &s.instances[i];
        println!("  {:<10} {:<13} at ({:6.1}, {:6.1})", o.color.phrase(), o.class.phrase(), o.centroid[0], o.centroid[1]);
    }
    for q in corpus.queries.iter().filter(|q| q.gt_submap_id == s.id).take(2) {
        println!("\nquery {} at ({:.1}, {:.1}):", q.id, q.gt_position[0], q.gt_position[1]);
        for d in &q.descriptions {
            println!("  {d}");
        }
    }

    // Every sentence names an object of its submap and states the true relation.
    let mut checked = 0;
    for q in &corpus.queries {
        let submap = corpus.submap(q.gt_submap_id).expect("ground-truth submap exists");
        for d in &q.descriptions {
            let (rel, color, class) = parse_description(d).expect("generated sentences parse");
            let ok = submap
                .instances
                .iter()
                .any(|o| o.color == color && o.class == class && relation_truth(q.gt_position, o, &gen.rules) == rel);
            assert!(ok, "sentence {d:?} does not hold");
            checked += 1;
        }
    }
    println!("\n{checked} sentences checked against the relation rules");

    let dir = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("spatialoc-city"));
    save_corpus(&dir, &corpus)?;
    let back = load_corpus(&dir)?;
    assert_eq!(back.manifest.checksum, corpus.manifest.checksum);
    println!("written to {}", dir.display());
    Ok(())
}
