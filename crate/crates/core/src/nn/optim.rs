use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::Result;

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &(Tensor, Tensor))> {
        self.moments.iter()
    }

    pub fn set_state(&mut self, step: u64, moments: BTreeMap<String, (Tensor, Tensor)>) {
        self.step = step;
        self.moments = moments;
    }

    /// Applies one update to every parameter in `store`; parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param) in store.params_mut() {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            let g = grads.get(name);
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
