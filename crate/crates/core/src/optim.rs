//! Decoupled-weight-decay Adam, the learning-rate / weight-decay / momentum
//! schedules, and the EMA coupling of target to context parameters.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Schedules {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub wd_start: f64,
    pub wd_final: f64,
    pub ema_start: f64,
    pub ema_final: f64,
}

impl Schedules {
    /// 600 epochs with a 15-epoch warmup.
    pub fn paper(steps_per_epoch: usize) -> Self {
        Self {
            total_epochs: 600,
            warmup_epochs: 15,
            steps_per_epoch,
            lr_start: 1e-4,
            lr_peak: 1e-3,
            lr_final: 1e-6,
            wd_start: 0.04,
            wd_final: 0.4,
            ema_start: 0.996,
            ema_final: 1.0,
        }
    }

    /// Same endpoints over 100 epochs with a 5-epoch warmup.
    pub fn desk(steps_per_epoch: usize) -> Self {
        Self {
            total_epochs: 100,
            warmup_epochs: 5,
            ..Self::paper(steps_per_epoch)
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.steps_per_epoch == 0 || self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "schedule needs 0 <= warmup ({}) <= total ({}) epochs and steps_per_epoch > 0",
                self.warmup_epochs, self.total_epochs
            )));
        }
        let rates = [self.lr_start, self.lr_peak, self.lr_final, self.wd_start, self.wd_final];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("learning rates and weight decays must be finite and non-negative".into()));
        }
        if ![self.ema_start, self.ema_final].iter().all(|m| (0.0..=1.0).contains(m)) {
            return Err(Error::Config("EMA momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn check(&self, step: u64) -> Result<f64> {
        let total = self.total_steps();
        if step > total {
            return Err(Error::OutOfRange {
                what: "schedule steps",
                index: step as usize,
                len: total as usize + 1,
            });
        }
        Ok(step as f64 / total.max(1) as f64)
    }

    /// Linear warmup from `lr_start` to `lr_peak`, then cosine decay to
    /// `lr_final` at the last step.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        self.check(step)?;
        let warm = self.warmup_steps();
        if step < warm {
            let t = step as f64 / warm as f64;
            return Ok(lerp(self.lr_start, self.lr_peak, t));
        }
        let span = self.total_steps() - warm;
        let progress = if span == 0 { 1.0 } else { (step - warm) as f64 / span as f64 };
        let c = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress));
        Ok(self.lr_final * (1.0 - c) + self.lr_peak * c)
    }

    /// Linear over the whole run.
    pub fn wd_at(&self, step: u64) -> Result<f64> {
        let t = self.check(step)?;
        Ok(lerp(self.wd_start, self.wd_final, t))
    }

    /// Linear over the whole run.
    pub fn ema_at(&self, step: u64) -> Result<f64> {
        let t = self.check(step)?;
        Ok(lerp(self.ema_start, self.ema_final, t))
    }
}

/// Exact at both ends.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; off when `None`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Moment buffers for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(set: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = set.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One AdamW update. Decay is decoupled and applied first,
/// `θ ← θ − lr·wd·θ`, only to parameters flagged for decay; then
/// `θ ← θ − lr·m̂/(√v̂ + eps)` with bias-corrected moments.
pub fn optimizer_step(
    set: &mut ParamSet,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    lr: f64,
    wd: f64,
) -> Result<()> {
    if grads.len() != set.len() || state.first.len() != set.len() {
        return Err(Error::Structure(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.first.len(),
            set.len()
        )));
    }
    for (p, g) in set.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Structure(format!("gradient shape mismatch for {}", p.name)));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite("gradient"));
        }
    }
    let scale = match cfg.clip_norm {
        Some(cap) => {
            let norm = libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>());
            if norm > cap {
                cap / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for (k, param) in set.iter_mut().enumerate() {
        let decay = if param.decay { lr * wd } else { 0.0 };
        let g = grads[k].data();
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (i, w) in param.value.data_mut().iter_mut().enumerate() {
            let gi = g[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= decay * *w;
            let denom = libm::sqrt(vhat) + cfg.eps;
            if denom > 0.0 {
                *w -= lr * mhat / denom;
            }
        }
    }
    Ok(())
}

/// `θ̃ ← m·θ̃ + (1 − m)·θ` elementwise.
pub fn ema_update(context: &ParamSet, target: &mut ParamSet, momentum: f64) -> Result<()> {
    context.check_same_structure(target)?;
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    for (src, dst) in context.iter().zip(target.iter_mut()) {
        for (t, c) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
            *t = momentum * *t + (1.0 - momentum) * c;
        }
    }
    Ok(())
}
