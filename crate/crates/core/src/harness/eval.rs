use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{self, CoarseEpoch, FineEpoch, Model};
use crate::diffcore::Graph;
use crate::error::{Error, Result};
use crate::finestage::{self, PredictionRecord, RecallTable};
use crate::globalalign::{self, DescriptorModality, GlobalDescriptor};
use crate::retrieval::{self, Gallery, RetrievalResult};
use crate::scenegen::{Corpus, Split};

pub const RETRIEVAL_KS: [usize; 3] = [1, 3, 5];
pub const LOCALIZATION_KS: [usize; 3] = [1, 5, 10];
pub const LOCALIZATION_EPS: [f64; 3] = [5.0, 10.0, 15.0];

/// Batch size used for fine inference.
const FINE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub recall: f64,
}

/// Everything measured in one evaluation. Contains no wall-clock values, so
/// equal inputs give byte-identical JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_hash: String,
    pub fine_config_hash: Option<String>,
    pub corpus_checksum: String,
    pub split: Split,
    pub queries: usize,
    pub coarse_curve: Vec<CoarseEpoch>,
    pub fine_curve: Vec<FineEpoch>,
    pub retrieval: Vec<RecallAt>,
    /// Absent for coarse-only evaluation.
    pub localization: Option<RecallTable>,
    /// Mean L1 position error of fine predictions made in the true submap.
    pub fine_l1: Option<f64>,
    /// Mean L1 error of predicting the true submap's center.
    pub center_l1: f64,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.retrieval.iter().find(|r| r.k == k).map(|r| r.recall)
    }
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub descriptors: Vec<GlobalDescriptor>,
    pub retrieval: Vec<RetrievalResult>,
    pub predictions: Vec<PredictionRecord>,
}

/// Retrieval with `coarse`, and fine localization with `fine` when given.
pub fn evaluate(coarse: &Model, fine: Option<&Model>, corpus: &Corpus) -> Result<Evaluation> {
    if corpus.queries.is_empty() {
        return Err(Error::Data(format!("split {} has no queries", corpus.manifest.split)));
    }
    let prepared = model::prepare(&corpus.submaps)?;
    let index = corpus.submap_index();

    let mut descriptors = Vec::with_capacity(prepared.len() + corpus.queries.len());
    for s in &prepared {
        descriptors.push(GlobalDescriptor {
            id: s.submap.id,
            modality: DescriptorModality::Point,
            vector: model::point_descriptor(coarse, s)?,
        });
    }
    let gallery = Gallery::from_descriptors(&descriptors)?;
    let depth = LOCALIZATION_KS.iter().chain(&RETRIEVAL_KS).copied().max().unwrap_or(1);
    let mut results = Vec::with_capacity(corpus.queries.len());
    for q in &corpus.queries {
        let v = model::text_descriptor(coarse, q)?;
        results.push(retrieval::retrieve(q.id, &v, &gallery, depth)?);
        descriptors.push(GlobalDescriptor { id: q.id, modality: DescriptorModality::Text, vector: v });
    }
    let truth: HashMap<u32, u32> = corpus.queries.iter().map(|q| (q.id, q.gt_submap_id)).collect();
    let recall = retrieval::recall_at_k(&results, &truth, &RETRIEVAL_KS)?;

    let lookup = |id: u32| -> Result<&model::PreparedSubmap> {
        index
            .get(&id)
            .map(|&i| &prepared[i])
            .ok_or_else(|| Error::Data(format!("unknown submap {id}")))
    };
    let mut center_l1 = 0.0;
    for q in &corpus.queries {
        let c = lookup(q.gt_submap_id)?.submap.center;
        center_l1 += (c[0] - q.gt_position[0]).abs() + (c[1] - q.gt_position[1]).abs();
    }
    center_l1 /= corpus.queries.len() as f64;

    let mut predictions = Vec::new();
    let (localization, fine_l1) = match fine {
        None => (None, None),
        Some(fm) => {
            let mut pairs = Vec::new();
            for (r, q) in results.iter().zip(&corpus.queries) {
                for id in r.ids().take(LOCALIZATION_KS[LOCALIZATION_KS.len() - 1]) {
                    pairs.push((q, lookup(id)?));
                }
            }
            predictions = predict(fm, &pairs)?;
            let poses: HashMap<u32, [f64; 2]> = corpus.queries.iter().map(|q| (q.id, q.gt_position)).collect();
            let table = finestage::localization_recall(&predictions, &poses, &results, &LOCALIZATION_EPS, &LOCALIZATION_KS)?;

            let gt_pairs = corpus
                .queries
                .iter()
                .map(|q| Ok((q, lookup(q.gt_submap_id)?)))
                .collect::<Result<Vec<_>>>()?;
            let gt_preds = predict(fm, &gt_pairs)?;
            let l1: f64 = gt_preds
                .iter()
                .zip(&corpus.queries)
                .map(|(p, q)| (p.position[0] - q.gt_position[0]).abs() + (p.position[1] - q.gt_position[1]).abs())
                .sum();
            (Some(table), Some(l1 / corpus.queries.len() as f64))
        }
    };

    let report = MetricsReport {
        seed: coarse.config.seed,
        config_hash: coarse.config_hash(),
        fine_config_hash: fine.map(Model::config_hash),
        corpus_checksum: corpus.manifest.checksum.clone(),
        split: corpus.manifest.split,
        queries: corpus.queries.len(),
        coarse_curve: coarse.coarse_log.clone(),
        fine_curve: fine.map(|f| f.fine_log.clone()).unwrap_or_default(),
        retrieval: RETRIEVAL_KS.iter().zip(recall).map(|(&k, recall)| RecallAt { k, recall }).collect(),
        localization,
        fine_l1,
        center_l1,
    };
    Ok(Evaluation { report, descriptors, retrieval: results, predictions })
}

fn predict(model: &Model, pairs: &[(&crate::scenegen::Query, &model::PreparedSubmap)]) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(FINE_CHUNK) {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let pred = model::fine_forward(&mut g, &p, model, chunk)?;
        let pos = g.value(pred.position);
        for (i, (q, s)) in chunk.iter().enumerate() {
            out.push(PredictionRecord {
                query_id: q.id,
                submap_id: s.submap.id,
                position: [pos.at(i, 0), pos.at(i, 1)],
                lambda: pred.lam.map(|l| g.value(l).at(i, 0)).unwrap_or(1.0),
            });
        }
    }
    Ok(out)
}

pub fn retrieval_csv(report: &MetricsReport) -> String {
    let mut s = String::from("k,recall\n");
    for r in &report.retrieval {
        let _ = writeln!(s, "{},{:.6}", r.k, r.recall);
    }
    s
}

/// Rows are ε, columns k; a single `absent` row for coarse-only runs.
pub fn localization_csv(report: &MetricsReport) -> String {
    let mut s = String::from("eps_m");
    for k in LOCALIZATION_KS {
        let _ = write!(s, ",k{k}");
    }
    s.push('\n');
    match &report.localization {
        None => s.push_str("absent,,,\n"),
        Some(t) => {
            for (e, row) in t.eps.iter().zip(&t.values) {
                let _ = write!(s, "{e}");
                for v in row {
                    let _ = write!(s, ",{v:.6}");
                }
                s.push('\n');
            }
        }
    }
    s
}

/// Bar chart of recall against k, read back from the retrieval CSV.
pub fn recall_svg(csv: &str) -> Result<String> {
    let rows = csv
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, r) = l.split_once(',').ok_or_else(|| Error::Data(format!("bad CSV row {l:?}")))?;
            let r: f64 = r.parse().map_err(|_| Error::Data(format!("bad recall {r:?}")))?;
            Ok((k.to_string(), r))
        })
        .collect::<Result<Vec<_>>>()?;
    let (w, h, bar) = (60 + 70 * rows.len(), 240, 40);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = write!(s, r#"<line x1="40" y1="200" x2="{}" y2="200" stroke="black"/>"#, w - 10);
    for (i, (k, r)) in rows.iter().enumerate() {
        let x = 50 + 70 * i;
        let bh = (r.clamp(0.0, 1.0) * 180.0).round() as i64;
        let _ = write!(
            s,
            r#"<rect x="{x}" y="{}" width="{bar}" height="{bh}" fill="steelblue"/><text x="{}" y="216" text-anchor="middle">k={k}</text><text x="{}" y="{}" text-anchor="middle">{r:.2}</text>"#,
            200 - bh,
            x + bar / 2,
            x + bar / 2,
            195 - bh
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `metrics.json`, the CSV tables, descriptor, retrieval and
/// prediction dumps, and `recall.svg` when `svg` is set.
pub fn write_outputs(dir: &Path, eval: &Evaluation, svg: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_vec_pretty(&eval.report)?;
    json.push(b'\n');
    std::fs::write(dir.join("metrics.json"), json)?;
    let csv = retrieval_csv(&eval.report);
    std::fs::write(dir.join("retrieval.csv"), &csv)?;
    std::fs::write(dir.join("localization.csv"), localization_csv(&eval.report))?;
    globalalign::save_descriptors(&dir.join("descriptors.json"), &eval.descriptors)?;
    retrieval::write_results(&dir.join("retrieval.jsonl"), &eval.retrieval)?;
    if !eval.predictions.is_empty() {
        finestage::write_predictions(&dir.join("predictions.jsonl"), &eval.predictions)?;
    }
    if svg {
        std::fs::write(dir.join("recall.svg"), recall_svg(&csv)?)?;
    }
    Ok(())
}
