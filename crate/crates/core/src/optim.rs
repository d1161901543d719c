//! AdaBelief with bias correction, and cosine learning-rate annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaBelief {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    s: Vec<f64>,
    step: u64,
}

impl AdaBelief {
    pub fn new(n: usize) -> Self {
        Self::with_hyper(n, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: vec![0.0; n], s: vec![0.0; n], step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of `params` along `grads`; on non-finite input nothing is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch { expected: self.m.len(), got: grads.len().min(params.len()) });
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::invalid(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {k}")));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powf(self.step as f64);
        let c2 = 1.0 - self.beta2.powf(self.step as f64);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            let surprise = g - self.m[k];
            self.s[k] = self.beta2 * self.s[k] + (1.0 - self.beta2) * surprise * surprise + self.eps;
            let m_hat = self.m[k] / c1;
            let s_hat = self.s[k] / c2;
            params[k] -= lr * m_hat / (s_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π step / total))`.
pub fn cosine_lr(step: usize, total: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr_start);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + phase.cos()))
}
