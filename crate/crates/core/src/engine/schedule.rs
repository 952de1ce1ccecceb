use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::objective::{loss_and_gradient, StepContext};

/// Strength schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Upper clamp for the optimised strength.
    pub alpha_max: f64,
    /// Multiplier applied to the optimum before injection.
    pub lambda: f64,
    pub learning_rate: f64,
    /// Adam iterations per augmented step.
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// 1-based steps that receive an injection.
    pub window: BTreeSet<usize>,
    /// Layers that receive an injection; `None` means all.
    pub augmented_layers: Option<BTreeSet<usize>>,
    /// Start each step's search from the previous step's optimum instead of 0.
    pub warm_start: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            alpha_max: 0.04,
            lambda: 1.0,
            learning_rate: 0.001,
            iterations: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            window: (1..=10).collect(),
            augmented_layers: None,
            warm_start: false,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self, steps: usize, layers: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.alpha_max.is_finite() && self.alpha_max > 0.0) {
            return fail(format!("scheduler.alpha_max {} must be positive", self.alpha_max));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!("scheduler.lambda {} must be non-negative", self.lambda));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("scheduler.learning_rate {} must be positive", self.learning_rate));
        }
        if self.iterations == 0 {
            return fail("scheduler.iterations must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return fail("Adam constants out of range".into());
        }
        if let Some(&s) = self.window.iter().find(|&&s| s == 0 || s > steps) {
            return fail(format!("scheduler.window step {s} not in [1, {steps}]"));
        }
        if let Some(ls) = &self.augmented_layers {
            if let Some(&l) = ls.iter().find(|&&l| l >= layers) {
                return fail(format!("scheduler.augmented_layers entry {l} >= {layers}"));
            }
        }
        Ok(())
    }

    pub fn layer_set(&self, layers: usize) -> BTreeSet<usize> {
        self.augmented_layers.clone().unwrap_or_else(|| (0..layers).collect())
    }
}

/// Adam on a single scalar parameter.
#[derive(Debug, Clone)]
pub struct ScalarAdam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: 0.0, v: 0.0, t: 0 }
    }

    /// Returns the updated parameter.
    pub fn step(&mut self, param: f64, grad: f64) -> f64 {
        self.t += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad;
        let m_hat = self.m / (1.0 - self.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - self.beta2.powi(self.t));
        param - self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

/// Result of optimising one step's strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaOutcome {
    /// Strength to inject: `lambda * best`, clamped to `[0, lambda * alpha_max]`.
    pub alpha: f64,
    /// Best iterate before scaling by `lambda`.
    pub best: f64,
    pub loss_at_zero: f64,
    pub loss_at_optimum: f64,
    pub iterations_run: usize,
    /// `dL/da` at the best iterate.
    pub final_gradient: f64,
}

/// Adam from `start` (normally 0) with projection onto `[0, alpha_max]`
/// after every update. The lowest-loss iterate wins, and `alpha = 0` is
/// always a candidate, so the returned loss never exceeds the loss at zero.
pub fn optimize_alpha(ctx: &StepContext, cfg: &SchedulerConfig, start: f64) -> AlphaOutcome {
    let clamp = |a: f64| a.clamp(0.0, cfg.alpha_max);
    let (loss_at_zero, grad_at_zero) = loss_and_gradient(0.0, ctx);
    let mut best = (0.0, loss_at_zero, grad_at_zero);

    let mut adam = ScalarAdam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut alpha = clamp(start);
    let (mut loss, mut grad) = if alpha == 0.0 {
        (loss_at_zero, grad_at_zero)
    } else {
        loss_and_gradient(alpha, ctx)
    };
    for _ in 0..cfg.iterations {
        if loss < best.1 {
            best = (alpha, loss, grad);
        }
        alpha = clamp(adam.step(alpha, grad));
        (loss, grad) = loss_and_gradient(alpha, ctx);
    }
    if loss < best.1 {
        best = (alpha, loss, grad);
    }

    let cap = cfg.lambda * cfg.alpha_max;
    AlphaOutcome {
        alpha: (cfg.lambda * best.0).clamp(0.0, cap),
        best: best.0,
        loss_at_zero,
        loss_at_optimum: best.1,
        iterations_run: cfg.iterations,
        final_gradient: best.2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub step: usize,
    pub alpha: f64,
    pub loss_at_zero: f64,
    pub loss_at_optimum: f64,
    pub iterations_run: usize,
    pub final_gradient: f64,
}

/// Optimised strengths for the augmented steps of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub entries: Vec<ScheduleEntry>,
}

impl ScheduleRecord {
    pub fn alpha_at(&self, step: usize) -> f64 {
        self.entries.iter().find(|e| e.step == step).map_or(0.0, |e| e.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::objective::{alignment_loss, HeadContext, LayerContext};
    use crate::tensor::Matrix;

    fn one_query(base: [f64; 2], delta: [f64; 2], target: f64) -> StepContext {
        let head = HeadContext::from_logits(
            Matrix::from_rows(&[base.to_vec()]).unwrap(),
            Matrix::from_rows(&[delta.to_vec()]).unwrap(),
        )
        .unwrap();
        StepContext::new(1, vec![LayerContext { layer: 0, heads: vec![head], target: vec![target] }], [0].into())
            .unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = ScalarAdam::new(0.01, 0.9, 0.999, 1e-8);
        let p = adam.step(1.0, 3.0);
        assert!((p - 0.99).abs() < 1e-9);
        // and minimises a quadratic
        let mut x = 5.0;
        let mut adam = ScalarAdam::new(0.1, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            x = adam.step(x, 2.0 * (x - 1.5));
        }
        assert!((x - 1.5).abs() < 1e-3);
    }

    #[test]
    fn zero_delta_keeps_alpha_at_zero() {
        let ctx = one_query([0.2, 0.1], [0.0, 0.0], 0.8);
        let out = optimize_alpha(&ctx, &SchedulerConfig::default(), 0.0);
        assert_eq!(out.alpha, 0.0);
        assert_eq!(out.loss_at_optimum, out.loss_at_zero);
    }

    #[test]
    fn decreasing_loss_saturates_at_cap() {
        // Missing share starts far below the target and rises with alpha.
        let ctx = one_query([-3.0, 0.0], [1.0, 0.0], 0.9);
        let cfg = SchedulerConfig { lambda: 0.5, ..SchedulerConfig::default() };
        // grid scan confirms monotone decrease over [0, alpha_max]
        let grid: Vec<f64> = (0..=400).map(|i| alignment_loss(cfg.alpha_max * i as f64 / 400.0, &ctx)).collect();
        assert!(grid.windows(2).all(|w| w[1] < w[0]));
        let out = optimize_alpha(&ctx, &cfg, 0.0);
        assert_eq!(out.best, cfg.alpha_max);
        assert_eq!(out.alpha, cfg.lambda * cfg.alpha_max);
        assert!(out.loss_at_optimum < out.loss_at_zero);
    }

    #[test]
    fn increasing_loss_stays_at_zero() {
        let ctx = one_query([-3.0, 0.0], [-1.0, 0.0], 0.9);
        let out = optimize_alpha(&ctx, &SchedulerConfig::default(), 0.0);
        assert_eq!(out.alpha, 0.0);
        assert_eq!(out.loss_at_optimum, out.loss_at_zero);
    }

    #[test]
    fn warm_start_keeps_zero_as_candidate() {
        let ctx = one_query([-3.0, 0.0], [-1.0, 0.0], 0.9);
        let out = optimize_alpha(&ctx, &SchedulerConfig::default(), 0.03);
        assert!(out.loss_at_optimum <= out.loss_at_zero);
    }

    #[test]
    fn interior_optimum_is_found() {
        // sigmoid(a - 1) hits 0.5 at a = 1.
        let ctx = one_query([-1.0, 0.0], [1.0, 0.0], 0.5);
        let cfg = SchedulerConfig { alpha_max: 3.0, learning_rate: 0.05, iterations: 400, ..SchedulerConfig::default() };
        let out = optimize_alpha(&ctx, &cfg, 0.0);
        assert!((out.best - 1.0).abs() < 0.05, "{out:?}");
    }

    #[test]
    fn validation() {
        let ok = SchedulerConfig::default();
        assert!(ok.validate(28, 4).is_ok());
        assert!(SchedulerConfig { alpha_max: 0.0, ..ok.clone() }.validate(28, 4).is_err());
        assert!(SchedulerConfig { iterations: 0, ..ok.clone() }.validate(28, 4).is_err());
        assert!(SchedulerConfig { window: [0].into(), ..ok.clone() }.validate(28, 4).is_err());
        assert!(SchedulerConfig { window: [29].into(), ..ok.clone() }.validate(28, 4).is_err());
        assert!(SchedulerConfig { augmented_layers: Some([4].into()), ..ok }.validate(28, 4).is_err());
    }
}
