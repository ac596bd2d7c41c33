//! Adaptive-moment optimizer with decoupled weight decay and a
//! cosine-decayed step size.

use super::params::ParamStore;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Total steps for the cosine schedule.
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-3,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            total_steps: 200,
        }
    }
}

#[derive(Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: store.zero_grads(),
            v: store.zero_grads(),
        }
    }

    /// Step size for a given 0-based step index under the cosine schedule.
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = self.cfg.total_steps.max(1);
        let frac = (step.min(t)) as f64 / t as f64;
        self.cfg.lr_min
            + 0.5 * (self.cfg.lr - self.cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Applies one update from accumulated gradients (same layout as the
    /// store). Returns the step size that was used.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> f64 {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (bi, block) in store.blocks_mut().iter_mut().enumerate() {
            let g = &grads[bi];
            let m = &mut self.m[bi];
            let v = &mut self.v[bi];
            for i in 0..block.data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                block.data[i] -=
                    lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * block.data[i]);
            }
        }
        lr
    }
}
