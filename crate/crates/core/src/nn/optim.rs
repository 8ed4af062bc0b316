use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamKind, ParamStore};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

/// Adam with decoupled weight decay. Moment state is kept per parameter and
/// created on first update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![None; n_params],
            v: vec![None; n_params],
            steps: vec![0; n_params],
        }
    }

    /// One update. `lrs[i]` is the learning rate of parameter `i`; parameters
    /// without a gradient (frozen, unused, buffers) are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lrs: &[f64],
    ) -> Result<()> {
        if grads.len() != store.len() || lrs.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid(
                "optimizer state, gradients and learning rates must cover every parameter",
            ));
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.0;
            let Some(g) = &grads[i] else { continue };
            if store.entry(id).kind == ParamKind::Buffer {
                continue;
            }
            let p = store.get_mut(id);
            if g.len() != p.len() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let n = p.len();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let lr = lrs[i];
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            }
        }
        Ok(())
    }

    /// Flattened state for checkpointing: `(first moments, second moments,
    /// step counts)`; missing state is stored empty.
    pub fn state(&self) -> (&[Option<Vec<f64>>], &[Option<Vec<f64>>], &[u64]) {
        (&self.m, &self.v, &self.steps)
    }

    pub fn from_state(
        config: AdamWConfig,
        m: Vec<Option<Vec<f64>>>,
        v: Vec<Option<Vec<f64>>>,
        steps: Vec<u64>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.len() != steps.len() {
            return Err(Error::invalid("inconsistent optimizer state"));
        }
        Ok(Self {
            config,
            m,
            v,
            steps,
        })
    }
}
