//! Bias-corrected Adam.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.005, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update from the gradients stored in `params`, which are then
/// cleared. A non-finite gradient aborts before any parameter moves.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr >= 0.0) {
        return Err(invalid(format!("learning rate {} must be ≥ 0", cfg.lr)));
    }
    for (name, _, grad) in params.iter_mut() {
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, value, grad) in params.iter_mut() {
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(value.rows(), value.cols()));
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(value.rows(), value.cols()));
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), value.data_mut());
        for (k, &g) in grad.data().iter().enumerate() {
            md[k] = cfg.beta1 * md[k] + (1.0 - cfg.beta1) * g;
            vd[k] = cfg.beta2 * vd[k] + (1.0 - cfg.beta2) * g * g;
            let mh = md[k] / bc1;
            let vh = vd[k] / bc2;
            pd[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        grad.fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64, g: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::full(2, 2, v)).unwrap();
        p.grad_mut("w").unwrap().fill(g);
        p
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = store(1.5, 0.0);
        let before = p.clone();
        adam_step(&mut p, &mut AdamState::new(), &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w"), before.get("w"));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(0.0, 1.0);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &mut AdamState::new(), &cfg).unwrap();
        // m̂ = g, v̂ = g², so Δ = lr·g/(|g| + eps)
        let expected = -0.005 / (1.0 + 1e-8);
        for &x in p.get("w").unwrap().data() {
            assert!((x - expected).abs() < 1e-15);
        }
        assert_eq!(p.grad("w").unwrap().sum(), 0.0, "gradients cleared");
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = store(0.25, -3.0);
        let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        adam_step(&mut p, &mut AdamState::new(), &cfg).unwrap();
        assert!(p.get("w").unwrap().data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = store(0.0, f64::NAN);
        let err = adam_step(&mut p, &mut AdamState::new(), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
    }
}
