//! Adam with the inverse-square-root warm-up schedule.

use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 4000,
        }
    }
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)` for `step >= 1`.
pub fn warmup_lr(d_model: usize, step: u64, warmup: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
}

/// Optimizer state: step counter and first/second moment buffers per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    d_model: usize,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, d_model: usize, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            d_model,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        warmup_lr(self.d_model, self.step + 1, self.cfg.warmup_steps)
    }

    /// Applies one update and returns the learning rate used.
    ///
    /// `grads[i]` is the gradient of the `i`-th parameter in store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> f64 {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let lr = warmup_lr(self.d_model, self.step, self.cfg.warmup_steps);
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            assert_eq!(g.len(), p.len(), "gradient shape for parameter {i}");
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_crossover_branches_agree() {
        let lr = warmup_lr(64, 4000, 4000);
        let expect = 64f64.powf(-0.5) * 4000f64.powf(-0.5);
        assert!((lr - expect).abs() < 1e-18);
    }

    #[test]
    fn schedule_first_step() {
        let lr = warmup_lr(64, 1, 4000);
        let expect = 0.125 * 4000f64.powf(-1.5);
        assert!((lr - expect).abs() < 1e-20);
        assert!((lr - 4.94e-7).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_fn([3], |i| i as f64 - 1.0));
        let before = store.clone();
        let mut adam = Adam::new(&store, 8, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store, &[vec![0.0; 3]]);
        }
        assert_eq!(store, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn descends_on_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::full([1], 3.0));
        let cfg = AdamConfig {
            warmup_steps: 10,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(&store, 1, cfg);
        for _ in 0..2000 {
            let w = store.get(id).data()[0];
            adam.step(&mut store, &[vec![2.0 * w]]);
        }
        assert!(store.get(id).data()[0].abs() < 1e-2);
    }
}
