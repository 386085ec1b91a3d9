//! Exact nearest-neighbor search over submap descriptors.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::globalalign::{DescriptorModality, GlobalDescriptor};

/// Immutable set of submap descriptors.
#[derive(Clone, Debug)]
pub struct Gallery {
    ids: Vec<u32>,
    dim: usize,
    data: Vec<f64>,
}

impl Gallery {
    pub fn new(entries: impl IntoIterator<Item = (u32, Vec<f64>)>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        let mut seen = BTreeSet::new();
        for (id, v) in entries {
            if !seen.insert(id) {
                return Err(Error::Data(format!("duplicate gallery id {id}")));
            }
            let d = *dim.get_or_insert(v.len());
            contract!(v.len() == d, "gallery entry {id} has width {}, expected {d}", v.len());
            ids.push(id);
            data.extend(v);
        }
        if ids.is_empty() {
            return Err(Error::EmptyInput("empty gallery".into()));
        }
        Ok(Self { ids, dim: dim.unwrap_or(0), data })
    }

    /// Builds from the point rows of a descriptor dump.
    pub fn from_descriptors(d: &[GlobalDescriptor]) -> Result<Self> {
        Self::new(
            d.iter()
                .filter(|x| x.modality == DescriptorModality::Point)
                .map(|x| (x.id, x.vector.clone())),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u32,
    pub dist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: u32,
    pub topk: Vec<Hit>,
}

impl RetrievalResult {
    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.topk.iter().map(|h| h.id)
    }
}

/// The `k` nearest submaps by Euclidean distance, ties by ascending id.
/// `k` larger than the gallery returns everything.
pub fn retrieve(query_id: u32, query: &[f64], gallery: &Gallery, k: usize) -> Result<RetrievalResult> {
    contract!(k >= 1, "retrieve needs k >= 1");
    contract!(
        query.len() == gallery.dim,
        "query width {} does not match gallery width {}",
        query.len(),
        gallery.dim
    );
    let mut hits: Vec<Hit> = (0..gallery.len())
        .map(|i| {
            let d2: f64 = gallery.vector(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            Hit { id: gallery.ids[i], dist: d2.sqrt() }
        })
        .collect();
    hits.sort_by(|a, b| a.dist.total_cmp(&b.dist).then(a.id.cmp(&b.id)));
    hits.truncate(k);
    Ok(RetrievalResult { query_id, topk: hits })
}

/// Fraction of queries whose true submap is among the first `k` hits, for
/// each `k` in `ks`.
pub fn recall_at_k(results: &[RetrievalResult], truth: &HashMap<u32, u32>, ks: &[usize]) -> Result<Vec<f64>> {
    if results.is_empty() {
        return Err(Error::EmptyInput("no retrieval results".into()));
    }
    let mut hits = vec![0usize; ks.len()];
    for r in results {
        let gt = truth
            .get(&r.query_id)
            .ok_or_else(|| Error::Data(format!("query {} has no ground-truth submap", r.query_id)))?;
        let rank = r.topk.iter().position(|h| h.id == *gt);
        for (i, &k) in ks.iter().enumerate() {
            if rank.is_some_and(|r| r < k) {
                hits[i] += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / results.len() as f64).collect())
}

/// One JSON object per line: `{"query_id":…,"topk":[{"id":…,"dist":…},…]}`.
pub fn write_results(path: &Path, results: &[RetrievalResult]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<RetrievalResult>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
