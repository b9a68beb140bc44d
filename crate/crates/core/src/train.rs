//! Shared optimization loop pieces: AdamW with warmup and cosine decay,
//! gradient clipping, EMA tracking, and divergence checks.

use crate::error::{Error, Result};
use crate::numerics::{AdamW, Ema, Gradients, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta2: f64,
    pub warmup: usize,
    pub grad_clip: f64,
    pub ema_decay: f64,
}

impl OptimConfig {
    /// Learning rate at `step` (0-based): linear warmup, then cosine decay to 10%.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let frac = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

/// Optimizer plus EMA shadow for one model.
pub struct Trainer {
    pub config: OptimConfig,
    opt: AdamW<f32>,
    ema: Ema<f32>,
    pub losses: Vec<f32>,
}

impl Trainer {
    pub fn new(config: OptimConfig, store: &ParamStore<f32>) -> Result<Self> {
        let opt = AdamW::new(
            config.lr as f32,
            0.9,
            config.beta2 as f32,
            1e-8,
            config.weight_decay as f32,
        );
        let ema = Ema::new(config.ema_decay as f32, store.snapshot())?;
        Ok(Self {
            config,
            opt,
            ema,
            losses: Vec::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.losses.len()
    }

    /// Applies one update from `grads` of a loss with value `loss`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, mut grads: Gradients<f32>, loss: f32) -> Result<()> {
        let step = self.losses.len();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss: loss as f64 });
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: loss as f64 });
        }
        if self.config.grad_clip > 0.0 && norm as f64 > self.config.grad_clip {
            grads.scale((self.config.grad_clip / norm as f64) as f32);
        }
        self.opt.lr = self.config.lr_at(step) as f32;
        self.opt.step(store, &grads)?;
        self.ema.update_from(store)?;
        self.losses.push(loss);
        Ok(())
    }

    pub fn ema(&self) -> &[Tensor<f32>] {
        self.ema.shadow()
    }
}

/// Median of a window of losses.
pub fn median(values: &[f32]) -> f32 {
    if values.is_empty() {
        return f32::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let c = OptimConfig {
            steps: 100,
            batch_size: 1,
            lr: 1.0,
            weight_decay: 0.0,
            beta2: 0.999,
            warmup: 10,
            grad_clip: 0.0,
            ema_decay: 0.9,
        };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(100) - 0.1).abs() < 1e-12);
        assert!(c.lr_at(50) < c.lr_at(20));
    }
}
