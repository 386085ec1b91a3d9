//! Learnable sentence and object encoders producing `D`-wide features for
//! both modalities.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::diffcore::{nn, Bound, Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scenegen::{Color, ObjectClass, Query, SceneSubmap};

/// Closed token vocabulary; a token's line index is its embedding row.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Every word the description templates can produce.
    pub fn template() -> Self {
        let mut tokens: Vec<String> = [
            "the", "pose", "is", "a", "of", "north", "south", "east", "west", "on", "top", "near",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let words = Color::ALL
            .iter()
            .map(|c| c.phrase())
            .chain(ObjectClass::ALL.iter().map(|c| c.phrase()));
        for phrase in words {
            for w in phrase.split_whitespace() {
                if !tokens.iter().any(|t| t == w) {
                    tokens.push(w.to_string());
                }
            }
        }
        Self::new(tokens).expect("template tokens are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lower-cased whitespace tokenization.
    pub fn encode(&self, sentence: &str) -> Result<Vec<usize>> {
        sentence
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.index.get(&w).copied().ok_or(Error::Vocab(w))
            })
            .collect()
    }

    /// Plain text, one token per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }
}

/// Sentence features, one row per description.
#[derive(Clone, Copy, Debug)]
pub struct TextFeatureSet {
    pub features: Var,
    pub query_id: u32,
}

/// Object features, one row per instance in submap order.
#[derive(Clone, Debug)]
pub struct ObjectFeatureSet {
    pub features: Var,
    pub submap_id: u32,
    /// `[N_s, 3]` centroids, aligned with the feature rows.
    pub centroids: Tensor,
}

/// Registers the text and object encoders under `prefix`.
pub fn init_frontends(
    store: &mut ParameterStore,
    prefix: &str,
    vocab: &Vocab,
    width: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert_normal(format!("{prefix}.text.emb"), vocab.len(), width, 0.3, rng)?;
    nn::init_linear(store, &format!("{prefix}.text.proj"), width, width, rng)?;
    store.insert_normal(format!("{prefix}.obj.class"), ObjectClass::ALL.len(), width, 0.3, rng)?;
    store.insert_normal(format!("{prefix}.obj.color"), Color::ALL.len(), width, 0.3, rng)?;
    store.insert_normal(format!("{prefix}.obj.pos"), 3, width, 0.3, rng)
}

/// `t_j = tanh(W · mean(token embeddings of sentence j) + b)`.
pub fn encode_text(g: &mut Graph, p: &Bound, prefix: &str, vocab: &Vocab, query: &Query) -> Result<TextFeatureSet> {
    if query.descriptions.is_empty() {
        return Err(Error::EmptyInput(format!("query {} has no descriptions", query.id)));
    }
    let rows = query.descriptions.len();
    let mut averaging = vec![0.0; rows * vocab.len()];
    for (j, sentence) in query.descriptions.iter().enumerate() {
        let ids = vocab.encode(sentence)?;
        if ids.is_empty() {
            return Err(Error::EmptyInput(format!("query {}: empty sentence", query.id)));
        }
        let w = 1.0 / ids.len() as f64;
        for id in ids {
            averaging[j * vocab.len() + id] += w;
        }
    }
    let a = g.constant(Tensor::new(vec![rows, vocab.len()], averaging)?);
    let emb = p.var(&format!("{prefix}.text.emb"))?;
    let mean = g.matmul(a, emb)?;
    let lin = nn::linear(g, p, &format!("{prefix}.text.proj"), mean)?;
    Ok(TextFeatureSet {
        features: g.tanh(lin),
        query_id: query.id,
    })
}

/// `v_k = tanh(class_emb + color_emb + W · (centroid − center) / (extent / 2))`.
pub fn encode_objects(g: &mut Graph, p: &Bound, prefix: &str, submap: &SceneSubmap) -> Result<ObjectFeatureSet> {
    let n = submap.instances.len();
    if n < 2 {
        return Err(Error::TooFewInstances(n));
    }
    let n_class = ObjectClass::ALL.len();
    let n_color = Color::ALL.len();
    let mut class_hot = vec![0.0; n * n_class];
    let mut color_hot = vec![0.0; n * n_color];
    let mut rel = Vec::with_capacity(n * 3);
    let mut centroids = Vec::with_capacity(n * 3);
    let half = submap.extent / 2.0;
    for (k, o) in submap.instances.iter().enumerate() {
        class_hot[k * n_class + o.class.index()] = 1.0;
        color_hot[k * n_color + o.color.index()] = 1.0;
        rel.push((o.centroid[0] - submap.center[0]) / half);
        rel.push((o.centroid[1] - submap.center[1]) / half);
        rel.push(o.centroid[2] / half);
        centroids.extend_from_slice(&o.centroid);
    }
    let class_hot = g.constant(Tensor::new(vec![n, n_class], class_hot)?);
    let color_hot = g.constant(Tensor::new(vec![n, n_color], color_hot)?);
    let rel = g.constant(Tensor::new(vec![n, 3], rel)?);
    let ce = p.var(&format!("{prefix}.obj.class"))?;
    let ke = p.var(&format!("{prefix}.obj.color"))?;
    let pw = p.var(&format!("{prefix}.obj.pos"))?;
    let a = g.matmul(class_hot, ce)?;
    let b = g.matmul(color_hot, ke)?;
    let c = g.matmul(rel, pw)?;
    let ab = g.add(a, b)?;
    let sum = g.add(ab, c)?;
    Ok(ObjectFeatureSet {
        features: g.tanh(sum),
        submap_id: submap.id,
        centroids: Tensor::new(vec![n, 3], centroids)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::ObjectInstance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParameterStore, Vocab) {
        let vocab = Vocab::template();
        let mut store = ParameterStore::new();
        init_frontends(&mut store, "fe", &vocab, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, vocab)
    }

    fn query(descriptions: &[&str]) -> Query {
        Query {
            id: 1,
            descriptions: descriptions.iter().map(|s| s.to_string()).collect(),
            gt_position: [0.0, 0.0],
            gt_submap_id: 0,
        }
    }

    fn inst(id: u32, class: ObjectClass, color: Color, c: [f64; 3]) -> ObjectInstance {
        ObjectInstance { id, class, color, centroid: c }
    }

    #[test]
    fn template_vocab_covers_descriptions() {
        let v = Vocab::template();
        assert!(v.encode("The pose is on top of a dark green traffic light").is_ok());
        assert!(matches!(v.encode("The pose is behind a red pole"), Err(Error::Vocab(w)) if w == "behind"));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::template();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    #[test]
    fn identical_sentences_identical_rows() {
        let (store, vocab) = setup();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let s = "The pose is north of a red pole";
        let t = encode_text(&mut g, &p, "fe", &vocab, &query(&[s, "The pose is near a blue sign", s])).unwrap();
        let v = g.value(t.features);
        assert_eq!(v.row_slice(0), v.row_slice(2));
        assert_ne!(v.row_slice(0), v.row_slice(1));
    }

    #[test]
    fn zero_embeddings_make_rows_equal() {
        let (mut store, vocab) = setup();
        *store.get_mut("fe.text.emb").unwrap() = Tensor::zeros(&[vocab.len(), 6]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let q = query(&["The pose is north of a red pole", "The pose is near a blue sign"]);
        let t = encode_text(&mut g, &p, "fe", &vocab, &q).unwrap();
        let v = g.value(t.features);
        assert_eq!(v.row_slice(0), v.row_slice(1));
    }

    #[test]
    fn object_rows_follow_instances() {
        let (mut store, _) = setup();
        let a = inst(1, ObjectClass::Tree, Color::Brown, [3.0, 1.0, 0.0]);
        let b = inst(2, ObjectClass::Pole, Color::Red, [-4.0, 2.0, 1.0]);
        let s = SceneSubmap { id: 5, center: [0.0, 0.0], extent: 30.0, instances: vec![a.clone(), a.clone(), b.clone()] };
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = encode_objects(&mut g, &p, "fe", &s).unwrap();
        let v = g.value(f.features).clone();
        assert_eq!(v.row_slice(0), v.row_slice(1));

        let swapped = SceneSubmap { instances: vec![b, a.clone(), a], ..s.clone() };
        let f2 = encode_objects(&mut g, &p, "fe", &swapped).unwrap();
        assert_eq!(g.value(f2.features).row_slice(0), v.row_slice(2));
        assert_eq!(g.value(f2.features).row_slice(1), v.row_slice(0));

        *store.get_mut("fe.obj.pos").unwrap() = Tensor::zeros(&[3, 6]);
        let centered = SceneSubmap {
            instances: vec![inst(1, ObjectClass::Tree, Color::Brown, [0.0, 0.0, 0.0]); 2],
            ..s
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = encode_objects(&mut g, &p, "fe", &centered).unwrap();
        let ce = store.get("fe.obj.class").unwrap().row_slice(ObjectClass::Tree.index()).to_vec();
        let ke = store.get("fe.obj.color").unwrap().row_slice(Color::Brown.index()).to_vec();
        for (i, v) in g.value(f.features).row_slice(0).iter().enumerate() {
            assert!((v - (ce[i] + ke[i]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_instance_rejected() {
        let (store, _) = setup();
        let s = SceneSubmap {
            id: 1,
            center: [0.0, 0.0],
            extent: 30.0,
            instances: vec![inst(1, ObjectClass::Tree, Color::Brown, [0.0; 3])],
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        assert!(matches!(encode_objects(&mut g, &p, "fe", &s), Err(Error::TooFewInstances(1))));
    }
}
