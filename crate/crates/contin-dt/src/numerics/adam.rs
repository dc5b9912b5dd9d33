//! Bias-corrected adaptive-moment optimizer with decoupled weight decay.

use super::tensor::ParamStore;
use super::NumericsError;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state: per-parameter moment buffers plus a step counter that
/// increases by exactly one per update call.
pub struct Adam {
    cfg: AdamConfig,
    step_count: u64,
    moments: HashMap<usize, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every unfrozen parameter that currently holds a
    /// gradient buffer. Parameters without gradients are untouched, which is
    /// what keeps unselected heads bit-identical during multi-head training.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NumericsError> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (id, param) in store.iter_mut() {
            let Some(grad) = param.value.grad() else {
                continue;
            };
            assert!(
                !param.frozen,
                "optimizer refuses frozen parameter `{}`",
                param.name
            );
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(NumericsError::NonFinite {
                    context: "gradient",
                });
            }
            let grad = grad.to_vec();
            let n = grad.len();
            let mom = self.moments.entry(id.index()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let data = param.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                mom.m[i] = self.cfg.beta1 * mom.m[i] + (1.0 - self.cfg.beta1) * g;
                mom.v[i] = self.cfg.beta2 * mom.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                data[i] -= self.cfg.learning_rate
                    * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        store.value_mut(id).accumulate_grad(&[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Hand evaluation at t=1: m_hat = g, v_hat = g^2, update = lr * g/|g|.
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::new(vec![1], vec![0.0]).unwrap());
        store.value_mut(id).accumulate_grad(&[1.0]);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&mut store).unwrap();
        let p = store.value(id).data()[0];
        assert!((p + 0.1).abs() < 1e-6, "p = {p}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn params_without_grads_are_skipped() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::new(vec![1], vec![1.0]).unwrap());
        let b = store.register("b", Tensor::new(vec![1], vec![1.0]).unwrap());
        store.value_mut(a).accumulate_grad(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_ne!(store.value(a).data()[0], 1.0);
        assert_eq!(store.value(b).data()[0], 1.0);
    }

    #[test]
    fn nan_gradient_is_a_training_error() {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::new(vec![1], vec![0.0]).unwrap());
        store.value_mut(id).accumulate_grad(&[f32::NAN]);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(
            adam.step(&mut store),
            Err(NumericsError::NonFinite { .. })
        ));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.register("p", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
            let mut adam = Adam::new(AdamConfig::default());
            for step in 0..25 {
                store.clear_grads();
                let g = [0.1 * (step as f32 + 1.0), -0.2];
                store.value_mut(id).accumulate_grad(&g);
                adam.step(&mut store).unwrap();
            }
            store.value(id).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
