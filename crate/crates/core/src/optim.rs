//! First-order optimizers.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        Self { cfg, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update given gradients aligned with the store's tensors.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Matrix<T>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count does not match parameter count");
        self.step += 1;
        let clip = match self.cfg.clip_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g.sum_squares().as_f64()).sum::<f64>().sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::of(self.cfg.lr * bc2.sqrt() / bc1);
        let eps = T::of(self.cfg.eps * bc2.sqrt());
        let (b1, b2, clip) = (T::of(b1), T::of(b2), T::of(clip));
        for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
                let g = g * clip;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p - lr * *m / (v.sqrt() + eps);
            }
        }
    }
}
