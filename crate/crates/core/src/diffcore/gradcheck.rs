use std::fmt::Write as _;

use super::graph::{Graph, Var};
use super::params::{Bound, ParameterStore};
use crate::error::{contract, Result};

/// Finite-difference settings.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error,
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-4,
            max_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tol)
    }

    /// Plain-text table, one row per parameter.
    pub fn table(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(9).max(9);
        let mut out = format!("{:<width$}  {:>7}  {:>12}  status\n", "parameter", "checked", "max_rel_err");
        for e in &self.entries {
            let status = if e.max_rel_err <= self.tol { "ok" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>12.3e}  {status}",
                e.name, e.checked, e.max_rel_err
            );
        }
        let _ = writeln!(out, "tolerance {:.1e}, overall max {:.3e}", self.tol, self.max_rel_err());
        out
    }
}

/// Compares reverse-mode gradients of `f` against central finite
/// differences for every parameter in `store`.
///
/// `f` must be deterministic: any noise it uses has to be reseeded on
/// every call.
pub fn grad_check<F>(store: &ParameterStore, f: F, tol: f64, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let bound = s.bind_frozen(&mut g);
        let out = f(&mut g, &bound)?;
        contract!(g.value(out).len() == 1, "grad_check needs a scalar function");
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let out = f(&mut g, &bound)?;
    let grads = store.collect_grads(&bound, &g.backward(out)?);

    let mut probe = store.clone();
    let mut entries = Vec::new();
    for (name, value) in store.iter() {
        let n = value.len();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut max_rel = 0.0f64;
        for &i in &indices {
            let orig = value.data()[i];
            probe.get_mut(name).expect("same names").data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads[name].data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
        entries.push(ParamCheck {
            name: name.to_string(),
            checked: indices.len(),
            max_rel_err: max_rel,
        });
    }
    Ok(GradCheckReport { entries, tol })
}
