//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid!("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid!("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid!("epsilon must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// `θ ← θ − lr·wd·θ`, then the bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(invalid!("optimizer buffers differ in length"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let bad = grads.iter().filter(|g| !g.is_finite()).count();
        return Err(Error::NonFinite(format!(
            "gradient has {bad} non-finite entries (first at {i}: {}) at step {}",
            grads[i],
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = cfg.learning_rate * cfg.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= decay * params[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut p = vec![0.5, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn decay_applies_before_update() {
        let cfg = AdamConfig::default();
        let mut p = vec![2.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut s, &cfg).unwrap();
        assert_eq!(p[0], 2.0 - 1e-3 * 1e-4 * 2.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        let err = adam_step(&mut p, &[0.0, f64::NAN, 1.0], &mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(s.step, 0);
    }
}
