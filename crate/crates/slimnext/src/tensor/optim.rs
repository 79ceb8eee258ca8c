//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Per-parameter first/second moment state, keyed by parameter name.
#[derive(Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that has a gradient. Decay is
    /// decoupled: w -= lr * (mhat / (sqrt(vhat) + eps) + wd * w).
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::internal(format!("gradient for unknown parameter {name}")))?;
            if grad.len() != param.numel() {
                return Err(Error::shape(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    grad.len(),
                    param.numel()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let data = param.f32s_mut()?;
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * data[i]);
            }
        }
        Ok(())
    }

    /// Clears the first and second moments of one parameter at the given
    /// flat indices. A parameter that was never stepped has no state and
    /// nothing to clear. Frozen weights need this: stale moments would
    /// keep pushing a weight that the caller pinned at zero.
    pub fn zero_state_at(&mut self, name: &str, indices: &[usize]) {
        if let Some((m, v)) = self.moments.get_mut(name) {
            for &i in indices {
                m[i] = 0.0;
                v[i] = 0.0;
            }
        }
    }
}
