//! Bias-corrected Adam over named parameter buffers.

use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::networks::ParamSet;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// First/second moment buffers keyed by parameter name. Slots are
/// created lazily, so one state can serve a changing trainable subset.
pub struct AdamState {
    pub cfg: AdamConfig,
    slots: IndexMap<String, Slot>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState { cfg, slots: IndexMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One Adam update of a single buffer.
    pub fn update(&mut self, key: &str, value: &mut [f64], grad: &[f64]) {
        assert!(
            value.len() == grad.len(),
            "adam: buffer {key:?} has {} entries but gradient has {}",
            value.len(),
            grad.len()
        );
        let slot = self.slots.entry(key.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; value.len()],
            v: vec![0.0; value.len()],
            t: 0,
        });
        assert!(
            slot.m.len() == value.len(),
            "adam: buffer {key:?} changed size from {} to {}",
            slot.m.len(),
            value.len()
        );
        slot.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(slot.t as i32);
        let bc2 = 1.0 - b2.powi(slot.t as i32);
        for i in 0..value.len() {
            let g = grad[i];
            slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
            slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            value[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
        }
    }

    /// Drop all moment buffers (used when a phase restarts).
    pub fn reset(&mut self) {
        self.slots.clear();
    }
}

/// Update every parameter that has a gradient in `grads`.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet, grads: &IndexMap<String, Tensor>) {
    for (name, grad) in grads {
        let p = params.get_mut(name);
        assert!(
            p.shape() == grad.shape(),
            "adam: gradient shape {:?} does not match parameter {name:?} {:?}",
            grad.shape(),
            p.shape()
        );
        state.update(name, p.data_mut(), grad.data());
    }
}
