use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// First-order optimizer over the trainable parameters of a store, with a
/// constant step size.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config { field: "learning_rate".into(), reason: "must be positive".into() });
        }
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Decoupled weight decay: each step also scales trainable values by
    /// `1 − lr·wd`.
    pub fn with_weight_decay(mut self, wd: f64) -> Result<Self> {
        if !(wd >= 0.0 && wd.is_finite()) {
            return Err(Error::Config { field: "weight_decay".into(), reason: "must be a finite non-negative number".into() });
        }
        self.weight_decay = wd;
        Ok(self)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply accumulated gradients scaled by `grad_scale`, then zero them.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f64) {
        if self.m.is_empty() {
            self.m = store.iter().map(|p| alloc::vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            if self.weight_decay > 0.0 {
                let keep = 1.0 - self.lr * self.weight_decay;
                value.iter_mut().for_each(|x| *x *= keep);
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in value.iter_mut().zip(grad) {
                        *x -= self.lr * g * grad_scale;
                    }
                }
                OptimizerKind::Adam => {
                    for j in 0..value.len() {
                        let g = grad[j] * grad_scale;
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        value[j] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
                    }
                }
            }
        }
        store.zero_grads();
    }
}
