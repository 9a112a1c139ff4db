//! Momentum-free adaptive step (RMSprop form) with global-norm clipping.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this. `0` disables.
    pub clip_norm: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay: 0.99,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

/// `v ← ρv + (1−ρ)g²`, `θ ← θ − lr·g/(√v̂ + ε)` with `v̂` bias-corrected.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &ParamStore) -> Result<Self> {
        if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.decay) || !(config.eps > 0.0) || !(config.clip_norm >= 0.0) {
            return Err(Error::param("optimizer", "lr > 0, decay in [0,1), eps > 0, clip_norm >= 0"));
        }
        Ok(Self {
            config,
            second: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Non-finite gradients are rejected before any
    /// parameter changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.second.len() || grads.iter().zip(&self.second).any(|(g, s)| g.len() != s.len()) {
            return Err(Error::param("grads", "do not match the parameter layout"));
        }
        let norm2: f64 = grads.iter().flatten().map(|g| g * g).sum();
        if !norm2.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let c = self.config;
        let norm = math::sqrt(norm2);
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.steps += 1;
        let correction = 1.0 - math::powf(c.decay, self.steps as f64);
        for ((t, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.second) {
            for ((p, &gi), vi) in t.data.iter_mut().zip(g).zip(v.iter_mut()) {
                let gi = gi * scale;
                *vi = c.decay * *vi + (1.0 - c.decay) * gi * gi;
                let vhat = *vi / correction;
                *p -= c.lr * gi / (math::sqrt(vhat) + c.eps);
            }
        }
        Ok(())
    }
}
