//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::autograd::Params;
use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Array>,
    second: Vec<Array>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let zeros = || params.ids().map(|id| Array::zeros(params.value(id).shape())).collect();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the current gradient buffers. The buffers are
    /// left untouched; call [`Params::zero_grad`] before the next accumulation.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        for (name, _, grad) in params.values_and_grads_mut() {
            if !grad.is_finite() {
                return Err(Error::Numeric { param: name.to_string(), detail: "non-finite gradient".into() });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((_, value, grad), m), v) in params.values_and_grads_mut().zip(&mut self.first).zip(&mut self.second) {
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
