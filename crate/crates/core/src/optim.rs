//! AdamW with decoupled weight decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::ParamTree;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

/// First and second moments in parameter visiting order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<P: ParamTree<Tensor>>(params: &P) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(Tensor::zeros(t.shape())));
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

pub fn global_norm<P: ParamTree<Tensor>>(grads: &P) -> f32 {
    let mut s = 0.0f64;
    grads.visit("", &mut |_, t| {
        s += t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
    });
    libm::sqrt(s) as f32
}

/// One AdamW update of `params` in place.
pub fn adamw_step<P: ParamTree<Tensor>>(
    cfg: &AdamWConfig,
    state: &mut AdamState,
    params: &mut P,
    grads: &P,
) {
    let mut gs: Vec<&Tensor> = Vec::new();
    grads.visit("", &mut |_, t| gs.push(t));
    let clip = match cfg.grad_clip {
        Some(c) => {
            let n = global_norm(grads);
            if n > c { c / n } else { 1.0 }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::powf(cfg.beta1, t as f32);
    let bc2 = 1.0 - libm::powf(cfg.beta2, t as f32);
    let mut i = 0;
    params.visit_mut("", &mut |_, p| {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], gs[i]);
        for j in 0..p.len() {
            let gj = g.data()[j] * clip;
            let mj = cfg.beta1 * m.data()[j] + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v.data()[j] + (1.0 - cfg.beta2) * gj * gj;
            m.data_mut()[j] = mj;
            v.data_mut()[j] = vj;
            let update = (mj / bc1) / (libm::sqrtf(vj / bc2) + cfg.eps);
            let w = &mut p.data_mut()[j];
            *w -= cfg.lr * (update + cfg.weight_decay * *w);
        }
        i += 1;
    });
}
