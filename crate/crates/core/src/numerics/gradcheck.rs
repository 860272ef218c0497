//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{invalid, Error, Result};

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step, in `[1e-6, 1e-3]`.
    pub h: f64,
    /// Check at most this many entries, drawn uniformly; `None` checks all.
    pub sample: Option<usize>,
    pub seed: u64,
    /// Only parameters whose name starts with one of these prefixes.
    pub prefixes: Vec<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, sample: None, seed: 0, prefixes: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// `f` must be deterministic: it is re-evaluated twice per checked entry.
pub fn grad_check<F>(f: F, point: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.h) {
        return Err(invalid(format!("finite-difference step {} outside [1e-6, 1e-3]", opts.h)));
    }
    let mut tape = Tape::new();
    let bound = point.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("objective at the base point".into()));
    }
    let grads = tape.backward(loss);

    let selected = |name: &str| opts.prefixes.is_empty() || opts.prefixes.iter().any(|p| name.starts_with(p.as_str()));
    let mut entries: Vec<(String, usize, f64)> = Vec::new();
    for (name, var) in bound.iter() {
        if !selected(name) {
            continue;
        }
        let len = point.get(name).map_or(0, |t| t.len());
        let g = grads.get(var);
        for k in 0..len {
            entries.push((name.to_string(), k, g.map_or(0.0, |t| t.data()[k])));
        }
    }
    if let Some(n) = opts.sample {
        if n < entries.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked: Vec<usize> = sample(&mut rng, entries.len(), n).into_vec();
            picked.sort_unstable();
            entries = picked.into_iter().map(|i| entries[i].clone()).collect();
        }
    }

    let eval = |store: &ParamStore, name: &str| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let loss = f(&mut tape, &bound)?;
        let v = tape.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(name.to_string()))
        }
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut probe = point.clone();
    for (name, k, analytic) in entries {
        let orig = probe.get(&name).expect("bound name").data()[k];
        probe.get_mut(&name).expect("bound name").data_mut()[k] = orig + opts.h;
        let plus = eval(&probe, &name)?;
        probe.get_mut(&name).expect("bound name").data_mut()[k] = orig - opts.h;
        let minus = eval(&probe, &name)?;
        probe.get_mut(&name).expect("bound name").data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * opts.h);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((name.clone(), k));
        }
        report.checked += 1;
    }
    Ok(report)
}
