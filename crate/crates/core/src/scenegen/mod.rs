//! Synthetic city scenes, submaps and templated position descriptions.
//!
//! A city is a grid of square submaps, each `extent` meters on a side.
//! Every query pose lies inside its submap's cell, so the ground-truth
//! submap is also the one with the nearest center.

mod corpus;
mod relation;

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{load_corpus, save_corpus, Corpus, DatasetManifest, SCHEMA_VERSION};
pub use relation::{describe, parse_description, relation_truth, Relation, RelationRules};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectClass {
    Pole,
    Sidewalk,
    TrafficLight,
    Sign,
    Building,
    Wall,
    Tree,
    Road,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 8] = [
        ObjectClass::Pole,
        ObjectClass::Sidewalk,
        ObjectClass::TrafficLight,
        ObjectClass::Sign,
        ObjectClass::Building,
        ObjectClass::Wall,
        ObjectClass::Tree,
        ObjectClass::Road,
    ];

    /// Words used in descriptions.
    pub fn phrase(self) -> &'static str {
        match self {
            ObjectClass::Pole => "pole",
            ObjectClass::Sidewalk => "sidewalk",
            ObjectClass::TrafficLight => "traffic light",
            ObjectClass::Sign => "sign",
            ObjectClass::Building => "building",
            ObjectClass::Wall => "wall",
            ObjectClass::Tree => "tree",
            ObjectClass::Road => "road",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Color {
    Gray,
    DarkGreen,
    Red,
    Blue,
    Brown,
    Black,
    White,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Gray,
        Color::DarkGreen,
        Color::Red,
        Color::Blue,
        Color::Brown,
        Color::Black,
        Color::White,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Color::Gray => "gray",
            Color::DarkGreen => "dark green",
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Brown => "brown",
            Color::Black => "black",
            Color::White => "white",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: u32,
    pub class: ObjectClass,
    pub color: Color,
    /// Centroid in meters, scene frame.
    pub centroid: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSubmap {
    pub id: u32,
    pub center: [f64; 2],
    /// Side length of the square cell in meters.
    pub extent: f64,
    pub instances: Vec<ObjectInstance>,
}

impl SceneSubmap {
    /// Whether a 2D point lies in this submap's cell.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let h = self.extent / 2.0;
        (p[0] - self.center[0]).abs() <= h && (p[1] - self.center[1]).abs() <= h
    }

    /// Instance indices ordered by 2D distance from the center, ties by id.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.instances.len()).collect();
        let d = |i: usize| {
            let c = self.instances[i].centroid;
            (c[0] - self.center[0]).hypot(c[1] - self.center[1])
        };
        idx.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(self.instances[a].id.cmp(&self.instances[b].id)));
        idx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u32,
    pub descriptions: Vec<String>,
    pub gt_position: [f64; 2],
    pub gt_submap_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// First id of this split's submaps and queries; ranges never overlap.
    pub fn id_base(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Val => 100_000,
            Split::Test => 200_000,
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub submaps: usize,
    pub queries: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub descriptions_min: usize,
    pub descriptions_max: usize,
    pub extent: f64,
    pub rules: RelationRules,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            submaps: 50,
            queries: 500,
            instances_min: 4,
            instances_max: 10,
            descriptions_min: 3,
            descriptions_max: 6,
            extent: 30.0,
            rules: RelationRules::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.instances_max < 2 {
            return bad("instances_max must be at least 2");
        }
        if self.instances_min < 2 || self.instances_min > self.instances_max {
            return bad("instances_min must lie in [2, instances_max]");
        }
        if self.descriptions_min < 1 || self.descriptions_min > self.descriptions_max {
            return bad("descriptions_min must lie in [1, descriptions_max]");
        }
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return bad("extent must be positive");
        }
        if self.queries > 0 && self.submaps == 0 {
            return bad("queries need at least one submap");
        }
        self.rules.validate()
    }
}

/// SplitMix64 finalizer, used to derive independent streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, split: Split, kind: u64, index: usize) -> ChaCha8Rng {
    let s = mix(mix(mix(seed) ^ split.stream()) ^ kind) ^ index as u64;
    ChaCha8Rng::seed_from_u64(mix(s))
}

fn grid_center(index: usize, n: usize, extent: f64) -> [f64; 2] {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    [(index % cols) as f64 * extent, (index / cols) as f64 * extent]
}

fn generate_submap(seed: u64, split: Split, index: usize, n: usize, cfg: &GenConfig) -> SceneSubmap {
    let mut rng = stream(seed, split, 1, index);
    let id = split.id_base() + index as u32;
    let center = grid_center(index, n, cfg.extent);
    let h = cfg.extent / 2.0;
    let count = rng.random_range(cfg.instances_min..=cfg.instances_max);
    let instances = (0..count)
        .map(|k| ObjectInstance {
            id: id * 1000 + k as u32,
            class: ObjectClass::ALL[rng.random_range(0..ObjectClass::ALL.len())],
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            centroid: [
                center[0] + rng.random_range(-h..=h),
                center[1] + rng.random_range(-h..=h),
                rng.random_range(0.0..=5.0),
            ],
        })
        .collect();
    SceneSubmap {
        id,
        center,
        extent: cfg.extent,
        instances,
    }
}

fn generate_query(seed: u64, split: Split, index: usize, submap: &SceneSubmap, cfg: &GenConfig) -> Query {
    let mut rng = stream(seed, split, 2, index);
    // keep poses off the cell border so the nearest center is unambiguous
    let h = 0.45 * cfg.extent;
    let pose = [
        submap.center[0] + rng.random_range(-h..=h),
        submap.center[1] + rng.random_range(-h..=h),
    ];
    let wanted = rng.random_range(cfg.descriptions_min..=cfg.descriptions_max);
    let mut by_distance: Vec<&ObjectInstance> = submap.instances.iter().collect();
    let dist = |o: &ObjectInstance| (o.centroid[0] - pose[0]).hypot(o.centroid[1] - pose[1]);
    by_distance.sort_by(|a, b| dist(a).total_cmp(&dist(b)).then(a.id.cmp(&b.id)));
    let descriptions = by_distance
        .iter()
        .take(wanted.min(by_distance.len()))
        .map(|o| describe(pose, o, &cfg.rules))
        .collect();
    Query {
        id: split.id_base() + index as u32,
        descriptions,
        gt_position: pose,
        gt_submap_id: submap.id,
    }
}

/// Generates one city: submaps on a grid and queries spread evenly across
/// them. Deterministic in `(seed, split, cfg)`.
pub fn generate_city(seed: u64, split: Split, cfg: &GenConfig) -> Result<(Vec<SceneSubmap>, Vec<Query>)> {
    cfg.validate()?;
    let n = cfg.submaps;
    let submaps: Vec<SceneSubmap> = (0..n).map(|i| generate_submap(seed, split, i, n, cfg)).collect();
    let queries = (0..cfg.queries)
        .map(|q| generate_query(seed, split, q, &submaps[q % n], cfg))
        .collect();
    Ok((submaps, queries))
}

/// Fraction of submap pairs that share at least one identical
/// `(class, color)` object.
pub fn recurrence_fraction(submaps: &[SceneSubmap]) -> f64 {
    let sets: Vec<BTreeSet<(ObjectClass, Color)>> = submaps
        .iter()
        .map(|s| s.instances.iter().map(|o| (o.class, o.color)).collect())
        .collect();
    let mut pairs = 0usize;
    let mut shared = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            pairs += 1;
            if !sets[i].is_disjoint(&sets[j]) {
                shared += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        shared as f64 / pairs as f64
    }
}

/// Checks every description of `query` against the ground-truth submap:
/// some instance of the named class and color must satisfy the relation.
pub fn validate_query(query: &Query, submap: &SceneSubmap, rules: &RelationRules) -> Result<()> {
    for d in &query.descriptions {
        let (rel, color, class) =
            parse_description(d).ok_or_else(|| Error::Data(format!("unparseable description `{d}`")))?;
        let holds = submap
            .instances
            .iter()
            .filter(|o| o.class == class && o.color == color)
            .any(|o| relation_truth(query.gt_position, o, rules) == rel);
        if !holds {
            return Err(Error::Data(format!("query {}: `{d}` is false", query.id)));
        }
    }
    Ok(())
}
