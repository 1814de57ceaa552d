//! AdamW with a linear warmup / linear decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clipping threshold; `0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, max_grad_norm: 5.0 }
    }
}

/// Linear warmup over the first `warmup_ratio` of steps, then linear decay
/// to zero at `total_steps`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LinearWarmup {
    pub total_steps: usize,
    pub warmup_ratio: f64,
}

impl LinearWarmup {
    pub fn factor(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warmup = (self.warmup_ratio * total).ceil().max(1.0);
        let s = step as f64 + 1.0;
        if s <= warmup {
            s / warmup
        } else {
            ((total - s) / (total - warmup).max(1.0)).max(0.0)
        }
    }
}

/// First and second moment estimates, indexed like the parameter store.
#[derive(Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: usize,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| {
            p.ids()
                .map(|id| {
                    let (r, c) = p.get(id).shape();
                    Tensor::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        AdamW { config, step: 0, first: zeros(params), second: zeros(params) }
    }

    /// Applies one update with learning rate `config.lr * lr_factor`. Frozen
    /// parameters and parameters without gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr_factor: f64) {
        self.step += 1;
        let c = self.config;
        let clip = if c.max_grad_norm > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.data().iter().map(|x| x.as_f64() * x.as_f64()))
                .sum::<f64>()
                .sqrt();
            if norm > c.max_grad_norm { c.max_grad_norm / norm } else { 1.0 }
        } else {
            1.0
        };
        let lr = c.lr * lr_factor;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            if !params.is_trainable(id) {
                continue;
            }
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let w = params.get_mut(id).data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k].as_f64() * clip;
                let mk = c.beta1 * m[k].as_f64() + (1.0 - c.beta1) * gk;
                let vk = c.beta2 * v[k].as_f64() + (1.0 - c.beta2) * gk * gk;
                m[k] = T::of(mk);
                v[k] = T::of(vk);
                let mhat = mk / bc1;
                let vhat = vk / bc2;
                let wk = w[k].as_f64();
                w[k] = T::of(wk - lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * wk));
            }
        }
    }
}
