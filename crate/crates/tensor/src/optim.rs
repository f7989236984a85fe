//! AdamW with per-parameter learning-rate groups.

use crate::param::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

struct Slot {
    id: ParamId,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Decoupled-weight-decay Adam over an explicit list of (parameter, lr) pairs.
/// Only the listed parameters are touched.
pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: Vec<(ParamId, f64)>, store: &ParamStore) -> Self {
        let slots = params
            .into_iter()
            .map(|(id, lr)| {
                let n = store.value(id).len();
                Slot {
                    id,
                    lr,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        AdamW { cfg, slots, t: 0 }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.slots.iter().map(|s| s.id).collect()
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.t as i32);
        let bias2 = 1.0 - c.beta2.powi(self.t as i32);
        for slot in &mut self.slots {
            debug_assert!(store.is_trainable(slot.id), "optimizer slot for frozen param");
            let grad = store.grad(slot.id).to_vec();
            let value = store.value_mut(slot.id);
            for i in 0..value.len() {
                let g = grad[i];
                slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
                slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
                let mh = slot.m[i] / bias1;
                let vh = slot.v[i] / bias2;
                value[i] -= slot.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * value[i]);
            }
        }
    }
}
