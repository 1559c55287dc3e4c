use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    moments: HashMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one bias-corrected Adam update to every trainable parameter,
    /// then clears all gradients. Frozen parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        let frozen = store.freeze_mask().clone();
        for (name, t) in store.iter() {
            if !frozen.contains(name) && t.grad.is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        self.step += 1;
        let cfg = self.config;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let (b1, b2) = (F::from_f64_lossy(cfg.beta1), F::from_f64_lossy(cfg.beta2));
        let (ob1, ob2) = (F::one() - b1, F::one() - b2);
        let step_size = F::from_f64_lossy(cfg.lr / bc1);
        let inv_bc2 = F::from_f64_lossy(1.0 / bc2);
        let eps = F::from_f64_lossy(cfg.eps);
        for (name, t) in store.iter_mut() {
            let grad = t.grad.take();
            if frozen.contains(name) {
                continue;
            }
            let grad = grad.expect("checked above");
            let n = grad.len();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![F::zero(); n], vec![F::zero(); n]));
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + ob1 * *g;
                *v = b2 * *v + ob2 * *g * *g;
                let denom = (*v * inv_bc2).sqrt() + eps;
                *p -= step_size * *m / denom;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<F: Real>(store: &mut ParamStore<F>, state: &mut AdamState<F>) -> Result<()> {
    state.step(store)
}
