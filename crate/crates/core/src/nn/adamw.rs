//! Adam with decoupled weight decay.
//!
//! Weight decay is applied directly to the parameter (not folded into the
//! gradient), so decay strength is independent of the adaptive scaling:
//! `p -= lr·(m̂/(√v̂+eps) + wd·p)`.

use std::collections::BTreeMap;

use crate::nn::Params;

/// Per-parameter first and second moment vectors, keyed by name.
pub type Moments = BTreeMap<String, (Vec<f64>, Vec<f64>)>;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    /// Per-parameter first/second moment buffers, keyed by parameter name.
    state: Moments,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            state: Moments::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One optimization step over every parameter the module exposes.
    pub fn step(&mut self, module: &mut dyn Params) {
        self.t += 1;
        let t = self.t;
        let (b1, b2, eps, lr, wd) = (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let state = &mut self.state;
        module.visit(&mut |name, value, grad| {
            let entry = state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; value.len()], vec![0.0; value.len()]));
            assert_eq!(entry.0.len(), value.len(), "moment size for {name}");
            for i in 0..value.len() {
                let g = grad[i];
                entry.0[i] = b1 * entry.0[i] + (1.0 - b1) * g;
                entry.1[i] = b2 * entry.1[i] + (1.0 - b2) * g * g;
                let mhat = entry.0[i] / bc1;
                let vhat = entry.1[i] / bc2;
                value[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * value[i]);
            }
        });
    }

    /// Moment buffers and step counter, for checkpointing.
    pub fn export_state(&self) -> (u64, &Moments) {
        (self.t, &self.state)
    }

    pub fn import_state(&mut self, t: u64, state: Moments) {
        self.t = t;
        self.state = state;
    }
}
