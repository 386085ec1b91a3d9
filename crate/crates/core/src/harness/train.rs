use std::collections::HashMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::model::{self, CoarseEpoch, FineEpoch, Model, PreparedSubmap, GLOBAL, INSTANCE};
use crate::diffcore::{Graph, Noise, Tensor};
use crate::error::{Error, Result};
use crate::finestage;
use crate::globalalign;
use crate::scenegen::{Corpus, Query};

fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE: u64 = 1;
const NOISE: u64 = 2;

/// Splits a shuffled list of queries into batches of at most `size` in which
/// no submap appears twice.
pub fn distinct_batches(queries: &[&Query], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut members: Vec<Vec<u32>> = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        let slot = batches
            .iter()
            .zip(&members)
            .position(|(b, m)| b.len() < size && !m.contains(&q.gt_submap_id));
        match slot {
            Some(s) => {
                batches[s].push(i);
                members[s].push(q.gt_submap_id);
            }
            None => {
                batches.push(vec![i]);
                members.push(vec![q.gt_submap_id]);
            }
        }
    }
    batches
}

struct Epochs<'a> {
    queries: Vec<&'a Query>,
    by_id: HashMap<u32, usize>,
    prepared: Vec<PreparedSubmap>,
}

impl<'a> Epochs<'a> {
    fn new(corpus: &'a Corpus) -> Result<Self> {
        if corpus.queries.is_empty() {
            return Err(Error::EmptyInput("training corpus has no queries".into()));
        }
        let prepared = model::prepare(&corpus.submaps)?;
        let by_id = corpus.submap_index();
        for q in &corpus.queries {
            if !by_id.contains_key(&q.gt_submap_id) {
                return Err(Error::Data(format!("query {} refers to unknown submap {}", q.id, q.gt_submap_id)));
            }
        }
        Ok(Self { queries: corpus.queries.iter().collect(), by_id, prepared })
    }

    fn batches(&self, seed: u64, epoch: usize, size: usize) -> Vec<Vec<&'a Query>> {
        let mut order = self.queries.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(seed, SHUFFLE, epoch as u64)));
        distinct_batches(&order, size)
            .into_iter()
            .map(|b| b.into_iter().map(|i| order[i]).collect())
            .collect()
    }

    fn submap(&self, q: &Query) -> &PreparedSubmap {
        &self.prepared[self.by_id[&q.gt_submap_id]]
    }
}

fn check_finite(value: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} became {value} at epoch {epoch}, step {step}")))
    }
}

/// Trains the coarse stage from a fresh initialization.
pub fn train_coarse(config: &RunConfig, corpus: &Corpus) -> Result<Model> {
    let mut model = Model::new(config)?;
    let data = Epochs::new(corpus)?;
    let opts = model.coarse_options();
    let stage = config.coarse;
    let mut step = 0usize;
    for epoch in 0..stage.epochs {
        let mut sums = [0.0; 4];
        let mut count = 0usize;
        for batch in data.batches(config.seed, epoch, stage.batch_size) {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let samples = batch
                .iter()
                .map(|q| model::coarse_sample(&mut g, &p, &model.vocab, data.submap(q), q))
                .collect::<Result<Vec<_>>>()?;
            let mut noise = Noise::seeded(derive(config.seed, NOISE, step as u64));
            let terms = globalalign::coarse_loss(&mut g, &p, (GLOBAL, INSTANCE), &samples, &opts, &mut noise)?;
            let total = g.value(terms.total).item();
            check_finite(total, "coarse loss", epoch, step)?;
            let grads = g.backward(terms.total)?;
            let grads = model.params.collect_grads(&p, &grads);
            model.params.adam_step(&grads, stage.lr)?;
            for (s, v) in sums.iter_mut().zip([terms.total, terms.global, terms.spatial, terms.instance]) {
                *s += g.value(v).item();
            }
            count += 1;
            step += 1;
            debug!("coarse epoch {epoch} step {step}: {total:.5}");
        }
        let n = count as f64;
        let e = CoarseEpoch {
            epoch,
            total: sums[0] / n,
            global: sums[1] / n,
            spatial: sums[2] / n,
            instance: sums[3] / n,
        };
        info!(
            "coarse epoch {epoch}: total {:.4} (global {:.4}, spatial {:.4}, instance {:.4})",
            e.total, e.global, e.spatial, e.instance
        );
        model.coarse_log.push(e);
    }
    Ok(model)
}

/// Trains the fine stage on (query, ground-truth submap) pairs, starting
/// from the coarse model's encoders. Only the encoders and the fine layers
/// are updated.
pub fn train_fine(config: &RunConfig, corpus: &Corpus, coarse: &Model) -> Result<Model> {
    if coarse.config.model != config.model {
        return Err(Error::Config("coarse checkpoint was trained with different model widths".into()));
    }
    let mut model = Model::new(config)?;
    model.params.copy_prefix_from(&coarse.params, &format!("{}.", model::FRONTEND));
    model.params.copy_prefix_from(&coarse.params, &format!("{INSTANCE}."));
    model.params.copy_prefix_from(&coarse.params, &format!("{GLOBAL}."));
    model.coarse_log = coarse.coarse_log.clone();
    let data = Epochs::new(corpus)?;
    let stage = config.fine;
    let mut step = 0usize;
    for epoch in 0..stage.epochs {
        let (mut loss_sum, mut l1_sum, mut count, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for batch in data.batches(config.seed, epoch, stage.batch_size) {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let pairs: Vec<_> = batch.iter().map(|q| (*q, data.submap(q))).collect();
            let pred = model::fine_forward(&mut g, &p, &model, &pairs)?;
            let truth: Vec<f64> = batch.iter().flat_map(|q| q.gt_position).collect();
            let truth = Tensor::new(vec![batch.len(), 2], truth)?;
            let loss = finestage::uncertainty_loss(&mut g, pred.position, pred.lam, truth.clone())?;
            let value = g.value(loss).item();
            check_finite(value, "fine loss", epoch, step)?;
            let grads = g.backward(loss)?;
            let grads = model.params.collect_grads(&p, &grads);
            model.params.adam_step(&grads, stage.lr)?;
            let pos = g.value(pred.position);
            l1_sum += pos.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            count += batch.len();
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        let e = FineEpoch { epoch, loss: loss_sum / batches as f64, l1: l1_sum / count as f64 };
        info!("fine epoch {epoch}: loss {:.4}, mean L1 {:.3} m", e.loss, e.l1);
        model.fine_log.push(e);
    }
    Ok(model)
}
