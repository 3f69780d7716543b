use serde::{Deserialize, Serialize};

use super::{Array2, Gradients, ParamStore, Real, TensorError};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Multiplier applied to the learning rate by [`AdamState::epoch_decay`].
    pub epoch_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, epoch_decay: 0.97, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with per-epoch learning-rate decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Current learning rate (decays from `config.lr`).
    pub lr: f64,
    pub step: u64,
    pub rejected_steps: u64,
    pub m: Vec<Array2>,
    pub v: Vec<Array2>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Array2::zeros(p.rows(), p.cols())).collect();
        Self { config, lr: config.lr, step: 0, rejected_steps: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update. Non-finite gradients leave the parameters and
    /// moments untouched and increment `rejected_steps`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), TensorError> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(TensorError::Shape("gradient count does not match parameters".into()));
        }
        if !grads.all_finite() {
            self.rejected_steps += 1;
            return Err(TensorError::NonFiniteGradient);
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let step_size = self.lr / bc1;
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(id);
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(TensorError::Shape(format!("gradient for parameter {i} has the wrong shape")));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gj = *gj as f64;
                let mn = beta1 * (*mj as f64) + (1.0 - beta1) * gj;
                let vn = beta2 * (*vj as f64) + (1.0 - beta2) * gj * gj;
                *mj = mn as Real;
                *vj = vn as Real;
                let denom = (vn / bc2).sqrt() + eps;
                *pj -= (step_size * mn / denom) as Real;
            }
        }
        Ok(())
    }

    pub fn epoch_decay(&mut self) {
        self.lr *= self.config.epoch_decay;
    }
}
