//! Adam with optional global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, Tensor};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<ParamId, Tensor>,
    second: BTreeMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let m = self
                .first
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            let v = self
                .second
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= learning_rate * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }

    /// Moment tensors keyed by parameter, for checkpointing.
    pub fn state(&self) -> (u64, &BTreeMap<ParamId, Tensor>, &BTreeMap<ParamId, Tensor>) {
        (self.step, &self.first, &self.second)
    }

    pub fn restore(
        config: AdamConfig,
        step: u64,
        first: BTreeMap<ParamId, Tensor>,
        second: BTreeMap<ParamId, Tensor>,
    ) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }
}
