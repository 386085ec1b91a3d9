use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_city, GenConfig, Query, SceneSubmap, Split};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

const SUBMAPS_FILE: &str = "submaps.jsonl";
const QUERIES_FILE: &str = "queries.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

/// Sidecar describing one generated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub split: Split,
    pub submap_count: usize,
    pub query_count: usize,
    pub params: GenConfig,
    /// SHA-256 over the submap file bytes followed by the query file bytes.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub submaps: Vec<SceneSubmap>,
    pub queries: Vec<Query>,
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn checksum(submaps: &[u8], queries: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(submaps);
    h.update(queries);
    hex::encode(h.finalize())
}

impl Corpus {
    /// Generates a split and fills in its manifest.
    pub fn generate(seed: u64, split: Split, params: &GenConfig) -> Result<Self> {
        let (submaps, queries) = generate_city(seed, split, params)?;
        let sum = checksum(&to_jsonl(&submaps)?, &to_jsonl(&queries)?);
        Ok(Corpus {
            manifest: DatasetManifest {
                schema_version: SCHEMA_VERSION,
                seed,
                split,
                submap_count: submaps.len(),
                query_count: queries.len(),
                params: params.clone(),
                checksum: sum,
            },
            submaps,
            queries,
        })
    }

    pub fn submap(&self, id: u32) -> Option<&SceneSubmap> {
        self.submaps.iter().find(|s| s.id == id)
    }

    /// Position of each submap id in `submaps`.
    pub fn submap_index(&self) -> std::collections::HashMap<u32, usize> {
        self.submaps.iter().enumerate().map(|(i, s)| (s.id, i)).collect()
    }
}

/// Writes `submaps.jsonl`, `queries.jsonl` and `manifest.json` into `dir`.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    if corpus.submaps.is_empty() {
        return Err(Error::Data("refusing to save a corpus without submaps".into()));
    }
    fs::create_dir_all(dir)?;
    let submaps = to_jsonl(&corpus.submaps)?;
    let queries = to_jsonl(&corpus.queries)?;
    let mut manifest = corpus.manifest.clone();
    manifest.submap_count = corpus.submaps.len();
    manifest.query_count = corpus.queries.len();
    manifest.checksum = checksum(&submaps, &queries);
    fs::write(dir.join(SUBMAPS_FILE), submaps)?;
    fs::write(dir.join(QUERIES_FILE), queries)?;
    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &str) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::CorruptCorpus(format!("{what}: not UTF-8")))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::CorruptCorpus(format!("{what} line {}: {e}", i + 1)))
        })
        .collect()
}

/// Reads a corpus written by [`save_corpus`], verifying version and checksum.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_bytes = fs::read(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::CorruptCorpus(format!("manifest: {e}")))?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != SCHEMA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let manifest: DatasetManifest =
        serde_json::from_value(raw).map_err(|e| Error::CorruptCorpus(format!("manifest: {e}")))?;
    let submap_bytes = fs::read(dir.join(SUBMAPS_FILE))?;
    let query_bytes = fs::read(dir.join(QUERIES_FILE))?;
    if checksum(&submap_bytes, &query_bytes) != manifest.checksum {
        return Err(Error::CorruptCorpus(format!("checksum mismatch in {}", dir.display())));
    }
    let submaps: Vec<SceneSubmap> = parse_jsonl(&submap_bytes, SUBMAPS_FILE)?;
    let queries: Vec<Query> = parse_jsonl(&query_bytes, QUERIES_FILE)?;
    if submaps.len() != manifest.submap_count || queries.len() != manifest.query_count {
        return Err(Error::CorruptCorpus("record counts disagree with manifest".into()));
    }
    Ok(Corpus {
        manifest,
        submaps,
        queries,
    })
}
