use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Adam hyperparameters. Defaults are the usual `β1 = 0.9`, `β2 = 0.999`,
/// `ε = 1e-8`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable tensors plus their optimizer state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    #[serde(default)]
    moments: BTreeMap<String, Moments>,
    #[serde(default)]
    step: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

/// Gradient per parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Parameters bound as leaves of one [`Graph`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        contract!(!self.params.contains_key(&name), "parameter `{name}` registered twice");
        self.params.insert(name, value);
        Ok(())
    }

    /// Registers a `[rows, cols]` matrix with entries drawn from
    /// `N(0, scale²)`.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..rows * cols).map(|_| scale * normal.sample(rng)).collect();
        self.insert(name, Tensor::new(vec![rows, cols], data)?)
    }

    /// Registers a Glorot-scaled weight matrix.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let scale = (2.0 / (rows + cols) as f64).sqrt();
        self.insert_normal(name, rows, cols, scale, rng)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(&[rows, cols]))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Adds every parameter to `graph` as a gradient-tracked leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Adds every parameter to `graph` as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Gradient for every registered parameter; unreachable ones get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> GradMap {
        self.params
            .iter()
            .map(|(name, value)| {
                let g = bound
                    .vars
                    .get(name)
                    .and_then(|v| grads.get(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// One Adam update with learning rate `lr`.
    pub fn adam_step(&mut self, grads: &GradMap, lr: f64) -> Result<()> {
        for name in self.params.keys() {
            contract!(grads.contains_key(name), "missing gradient for `{name}`");
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, value) in self.params.iter_mut() {
            let g = &grads[name];
            contract!(
                g.len() == value.len(),
                "gradient for `{name}` has {} values, parameter has {}",
                g.len(),
                value.len()
            );
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; value.len()],
                v: vec![0.0; value.len()],
            });
            for (((p, &gi), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParameterStore, prefix: &str) -> usize {
        let mut n = 0;
        for (name, value) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            if let Some(dst) = self.params.get_mut(name) {
                if dst.shape() == value.shape() {
                    *dst = value.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Drops optimizer state, keeping parameter values.
    pub fn reset_optimizer(&mut self) {
        self.moments.clear();
        self.step = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(value: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(value)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(1.5);
        let grads = GradMap::from([("w".to_string(), Tensor::scalar(0.0))]);
        s.adam_step(&grads, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        for g in [3.0, -0.02] {
            let mut s = store_with(0.0);
            let grads = GradMap::from([("w".to_string(), Tensor::scalar(g))]);
            s.adam_step(&grads, 0.01).unwrap();
            let moved = s.get("w").unwrap().item();
            assert!((moved + 0.01 * f64::signum(g)).abs() < 1e-8, "{moved}");
        }
    }

    #[test]
    fn missing_gradient_is_contract_violation() {
        let mut s = store_with(0.0);
        assert!(matches!(s.adam_step(&GradMap::new(), 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store_with(0.0);
        assert!(s.insert("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut s = ParameterStore::new();
            s.insert_glorot("a", 3, 4, &mut rng).unwrap();
            for _ in 0..5 {
                let g: GradMap = s.iter().map(|(k, v)| (k.to_string(), v.map(|x| x.sin()))).collect();
                s.adam_step(&g, 0.05).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }
}
