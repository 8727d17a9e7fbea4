use std::collections::BTreeMap;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `lr0 * (1 - step/total)^power`, exact at both endpoints.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f64, power: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total_steps as f64).powf(power)
}

/// Bias-corrected Adam over the trainable entries of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, t: 0, moments: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Adam::new(cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Applies one update using the grads stored in `store`. Frozen entries
    /// and entries without a gradient are left alone. All gradients are
    /// checked before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (name, e) in store.iter() {
            if let (true, Some(g)) = (e.trainable, &e.grad) {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGrad(name.to_string()));
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, e) in store.iter_mut() {
            if !e.trainable {
                continue;
            }
            let Some(g) = &e.grad else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (((w, &gi), mi), vi) in e.value.data_mut().iter_mut().zip(g.data()).zip(md).zip(vd) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
