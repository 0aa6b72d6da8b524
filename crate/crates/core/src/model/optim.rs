//! AdamW with a linear warmup / linear decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::params::{decays, ParamSet};
use super::TaggerModel;

/// Piecewise-linear learning-rate schedule.
///
/// `lr(t) = base·t/warmup` for `t ≤ warmup`, then decays linearly to 0 at
/// `total_steps`. The k-th update (k = 1, 2, …) uses `lr(k)`, so the boundary
/// value `lr(0) = 0` is never applied and the final update uses `lr(total) = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr(&self, t: u64) -> f64 {
        if t >= self.total_steps {
            return 0.0;
        }
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            return self.base_lr * t as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        self.base_lr * (self.total_steps - t) as f64 / span
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    /// Number of completed updates.
    pub step: u64,
    pub schedule: LrSchedule,
    pub hyper: AdamWParams,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, schedule: LrSchedule, hyper: AdamWParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            schedule,
            hyper,
        }
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.lr(self.step + 1)
    }
}

/// One AdamW update of a single tensor at (1-based) step `t`.
///
/// Weight decay is decoupled: `θ ← θ − lr·wd·θ` before the moment-based
/// step, and it never enters the moment estimates.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    weight_decay: f64,
    hyper: &AdamWParams,
    t: u64,
) {
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let decay = T::from_f64_lossy(1.0 - lr * weight_decay);
    let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
    let (bc1t, bc2t) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
    let lr_t = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(hyper.eps);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1t * m[i] + one_b1 * g;
        v[i] = b2t * v[i] + one_b2 * g * g;
        let m_hat = m[i] / bc1t;
        let v_hat = v[i] / bc2t;
        theta[i] = theta[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

impl<T: Scalar> TaggerModel<T> {
    /// Applies one AdamW update. Fails without mutating anything if a gradient
    /// is non-finite or the schedule is exhausted.
    pub fn adamw_step(&mut self, opt: &mut OptimizerState<T>, grads: &ParamSet<T>) -> Result<()> {
        if opt.step >= opt.schedule.total_steps {
            return Err(Error::Numeric(format!(
                "optimizer step {} is past the schedule end {}",
                opt.step, opt.schedule.total_steps
            )));
        }
        if !grads.all_finite() {
            return Err(Error::Numeric("non-finite gradient; step aborted".into()));
        }
        let t = opt.step + 1;
        let lr = opt.schedule.lr(t);
        for (i, tensor) in self.params.tensors.iter_mut().enumerate() {
            let wd = if decays(&tensor.name) {
                opt.hyper.weight_decay
            } else {
                0.0
            };
            adamw_update(
                &mut tensor.data,
                &grads.tensors[i].data,
                &mut opt.m.tensors[i].data,
                &mut opt.v.tensors[i].data,
                lr,
                wd,
                &opt.hyper,
                t,
            );
        }
        opt.step = t;
        if !self.config.allow_revival {
            let mask = self.mask.clone();
            self.zero_masked_weights(&mask);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_decoupled_decay() {
        let mut th = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut th, &[0.0], &mut m, &mut v, 0.1, 0.01, &AdamWParams::default(), 1);
        assert!((th[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let mut th = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut th, &[1.0], &mut m, &mut v, 0.1, 0.01, &AdamWParams::default(), 1);
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.001;
        assert!((th[0] - expected).abs() < 1e-12);
        assert!((th[0] - 0.8990).abs() < 1e-4);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            base_lr: 1.0,
            warmup_steps: 100,
            total_steps: 1000,
        };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(50), 0.5);
        assert_eq!(s.lr(100), 1.0);
        assert!((s.lr(550) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(1000), 0.0);
        let no_warm = LrSchedule {
            base_lr: 2.0,
            warmup_steps: 0,
            total_steps: 4,
        };
        assert_eq!(no_warm.lr(0), 2.0);
        assert_eq!(no_warm.lr(2), 1.0);
    }
}
