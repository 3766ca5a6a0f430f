//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for the trainable parameters of one store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    lr_scale: Vec<f32>,
}

impl AdamW {
    /// Registers every parameter of `store` that is currently trainable.
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        let m = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        let lr_scale = vec![1.0; ids.len()];
        Self {
            config,
            step: 0,
            ids,
            m,
            v,
            lr_scale,
        }
    }

    /// Multiplies the learning rate of one registered parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f32) -> Result<()> {
        let slot = self
            .ids
            .iter()
            .position(|&p| p == id)
            .ok_or_else(|| Error::Usage(format!("parameter {} is not registered", id.index())))?;
        self.lr_scale[slot] = scale;
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.ids {
            let g = store
                .grad(id)
                .ok_or_else(|| Error::MissingGrad(store.name(id).to_string()))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "adamw_step" });
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (slot, &id) in self.ids.iter().enumerate() {
            let g = store.grad(id).expect("checked above").to_vec();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let lr = c.lr * self.lr_scale[slot];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                p[i] -= lr * c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
