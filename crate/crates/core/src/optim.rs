//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("adam lr must be > 0, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<ParamId, Moments> {
        &self.moments
    }

    /// Restores serialized state.
    pub fn restore(&mut self, step: u64, moments: BTreeMap<ParamId, Moments>) {
        self.step = step;
        self.moments = moments;
    }

    /// One update of every parameter listed in `grads`. Parameters without an
    /// entry are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if store.value(*id).shape() != g.shape() {
                return Err(Error::dim("adam_step", store.value(*id).shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, g) in grads {
            let n = g.numel();
            let m = self.moments.entry(*id).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            let p = store.value_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * gi;
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m.first[i] / bc1;
                let v_hat = m.second[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Owner;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.trainable("w", Owner::Shared, Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let (mut s, id) = one_param(1.25);
        let mut adam = AdamState::new(AdamConfig::default()).unwrap();
        for _ in 0..5 {
            adam.step(&mut s, &[(id, Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(s.value(id).item(), 1.25);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        let (mut s, id) = one_param(1.0);
        let mut adam = AdamState::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        })
        .unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let w = s.value(id).item();
            let loss = w * w;
            assert!(loss < prev);
            prev = loss;
            adam.step(&mut s, &[(id, Tensor::scalar(2.0 * w))]).unwrap();
        }
    }

    #[test]
    fn first_step_magnitude_is_lr_for_any_gradient_scale() {
        for g in [1e-6, 1.0, 1e6] {
            let (mut s, id) = one_param(0.0);
            let cfg = AdamConfig::default();
            let mut adam = AdamState::new(cfg).unwrap();
            adam.step(&mut s, &[(id, Tensor::scalar(g))]).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let expected = cfg.lr * g / (g + cfg.epsilon);
            assert!((s.value(id).item() + expected).abs() < 1e-18);
            // within 1% of lr even when g is only 100ε
            assert!((s.value(id).item().abs() - cfg.lr).abs() <= 0.01 * cfg.lr);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(AdamState::new(AdamConfig { lr: 0.0, ..Default::default() }).is_err());
        assert!(AdamState::new(AdamConfig { beta1: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn step_counter_increases() {
        let (mut s, id) = one_param(0.0);
        let mut adam = AdamState::new(AdamConfig::default()).unwrap();
        adam.step(&mut s, &[(id, Tensor::scalar(1.0))]).unwrap();
        adam.step(&mut s, &[(id, Tensor::scalar(1.0))]).unwrap();
        assert_eq!(adam.step_count(), 2);
        assert_eq!(adam.moments()[&id].first.len(), 1);
    }
}
