//! Numerical checks of two perturbation properties of key injection.
//!
//! 1. Orthogonality: for random unit vectors `q`, `dk` in `d` dimensions the
//!    logit shift `delta = alpha / sqrt(d) * <q, dk>` exceeds a threshold
//!    with a probability that decays exponentially in `d`. Estimated by
//!    Monte Carlo and fitted on a log scale.
//! 2. Mass concentration: adding a positive shift to a subset of logits
//!    strictly increases the softmax mass of that subset, and for a uniform
//!    shift the new mass has the closed form `p e^s / (p e^s + 1 - p)`.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::softmax_in_place;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityExperiment {
    pub dims: Vec<usize>,
    pub alpha: f64,
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for OrthogonalityExperiment {
    fn default() -> Self {
        Self {
            dims: vec![8, 16, 32, 64],
            alpha: 1.0,
            epsilon: 0.05,
            trials: 100_000,
            seed: 0,
        }
    }
}

impl OrthogonalityExperiment {
    pub const MIN_TRIALS: usize = 1000;

    pub fn validate(&self) -> Result<()> {
        if self.trials < Self::MIN_TRIALS {
            return Err(Error::Config(format!(
                "trials {} below the minimum of {}",
                self.trials,
                Self::MIN_TRIALS
            )));
        }
        if self.dims.is_empty() || self.dims[0] == 0 || self.dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("dims must be positive and strictly increasing".into()));
        }
        if !self.alpha.is_finite() || !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config("alpha must be finite and epsilon non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub dim: usize,
    pub exceedances: u64,
    /// Empirical `P(|delta| >= epsilon)`.
    pub tail: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub experiment: OrthogonalityExperiment,
    pub points: Vec<TailPoint>,
    /// Least-squares fit of `ln(tail)` against `dim` over non-zero tails.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    /// `-slope * alpha^2 / epsilon^2`: the effective exponent constant for
    /// unit-norm vectors.
    pub fitted_c: Option<f64>,
    /// Dimensions left out of the fit because no trial exceeded epsilon.
    pub zero_tail_dims: Vec<usize>,
}

impl TailReport {
    pub fn tails_non_increasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].tail <= w[0].tail)
    }

    /// Trend holds and, where a fit exists, it explains at least `min_r2`.
    pub fn passes(&self, min_r2: f64) -> bool {
        self.tails_non_increasing() && self.r_squared.map_or(true, |r2| r2 >= min_r2)
    }
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Logit shift of one trial. Each trial owns its random stream, so the
/// result does not depend on scheduling.
pub fn orthogonality_trial(exp: &OrthogonalityExperiment, dim: usize, trial: usize) -> f64 {
    let mut rng = seed::stream(&[seed::TAG_SPHERE, exp.seed, dim as u64, trial as u64]);
    let q = unit_vector(&mut rng, dim);
    let dk = unit_vector(&mut rng, dim);
    let dot: f64 = q.iter().zip(&dk).map(|(a, b)| a * b).sum();
    exp.alpha / (dim as f64).sqrt() * dot
}

pub fn mc_orthogonality(exp: &OrthogonalityExperiment) -> Result<TailReport> {
    exp.validate()?;
    let points: Vec<TailPoint> = exp
        .dims
        .iter()
        .map(|&dim| {
            let exceedances = (0..exp.trials)
                .into_par_iter()
                .filter(|&i| orthogonality_trial(exp, dim, i).abs() >= exp.epsilon)
                .count() as u64;
            TailPoint {
                dim,
                exceedances,
                tail: exceedances as f64 / exp.trials as f64,
            }
        })
        .collect();

    let fit_pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.tail > 0.0)
        .map(|p| (p.dim as f64, p.tail.ln()))
        .collect();
    let zero_tail_dims = points.iter().filter(|p| p.tail == 0.0).map(|p| p.dim).collect();
    let (slope, intercept, r_squared) = match linear_fit(&fit_pts) {
        Some((s, i, r2)) => (Some(s), Some(i), r2),
        None => (None, None, None),
    };
    let fitted_c = slope
        .filter(|_| exp.epsilon > 0.0 && exp.alpha != 0.0)
        .map(|s| -s * exp.alpha * exp.alpha / (exp.epsilon * exp.epsilon));
    Ok(TailReport {
        experiment: exp.clone(),
        points,
        slope,
        intercept,
        r_squared,
        fitted_c,
        zero_tail_dims,
    })
}

/// Ordinary least squares `y = slope x + intercept`. `R^2` is `None` when
/// `y` has no variance.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<(f64, f64, Option<f64>)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Some((slope, intercept, r2))
}

/// Mass of a token after its logit is shifted by `delta_s`, given its
/// current mass `a`.
pub fn reweight_closed_form(a: f64, delta_s: f64) -> Result<f64> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::Input(format!("mass {a} not in (0, 1)")));
    }
    if !delta_s.is_finite() {
        return Err(Error::Input("shift must be finite".into()));
    }
    let boosted = a * delta_s.exp();
    Ok(boosted / (boosted + (1.0 - a)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassCheck {
    pub passed: bool,
    pub before: f64,
    pub after: f64,
    /// Closed-form prediction from the aggregated mass.
    pub closed_form: f64,
}

impl MassCheck {
    pub fn closed_form_error(&self) -> f64 {
        (self.after - self.closed_form).abs()
    }
}

fn softmax_mass(logits: &[f64], target: &BTreeSet<usize>) -> f64 {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    target.iter().map(|&i| p[i]).sum()
}

/// Softmax mass of `target` before and after adding `delta_s` to its logits.
pub fn verify_mass_concentration(logits: &[f64], target: &BTreeSet<usize>, delta_s: f64) -> Result<MassCheck> {
    if !(delta_s.is_finite() && delta_s > 0.0) {
        return Err(Error::Input(format!("shift {delta_s} must be positive")));
    }
    if target.is_empty() || target.len() >= logits.len() {
        return Err(Error::Input("target must be a non-empty proper subset".into()));
    }
    if target.iter().any(|&i| i >= logits.len()) {
        return Err(Error::Input("target index out of range".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite logit".into()));
    }
    let before = softmax_mass(logits, target);
    let shifted: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &s)| if target.contains(&i) { s + delta_s } else { s })
        .collect();
    let after = softmax_mass(&shifted, target);
    Ok(MassCheck {
        passed: after > before,
        before,
        after,
        closed_form: reweight_closed_form(before, delta_s)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassSuiteReport {
    pub instances: usize,
    pub seed: u64,
    pub failures: usize,
    pub max_closed_form_error: f64,
}

impl MassSuiteReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.failures == 0 && self.max_closed_form_error <= tolerance
    }
}

/// Random instance `i` of the concentration suite: `N` in `[2, 32]`,
/// logits `N(0, 4)`, a random non-empty proper target subset, and a shift
/// in `(0, 5]`.
pub fn mass_instance(seed: u64, i: usize) -> (Vec<f64>, BTreeSet<usize>, f64) {
    let mut rng = seed::stream(&[seed::TAG_LOGITS, seed, i as u64]);
    let n = rng.gen_range(2..=32usize);
    let normal = Normal::new(0.0, 2.0).expect("positive std");
    let logits: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let size = rng.gen_range(1..n);
    let target: BTreeSet<usize> = rand::seq::index::sample(&mut rng, n, size).into_iter().collect();
    let delta_s = 5.0 * (1.0 - rng.gen::<f64>());
    (logits, target, delta_s)
}

pub fn mass_concentration_suite(instances: usize, seed: u64) -> Result<MassSuiteReport> {
    if instances == 0 {
        return Err(Error::Config("instances must be >= 1".into()));
    }
    let mut failures = 0;
    let mut max_err: f64 = 0.0;
    for i in 0..instances {
        let (logits, target, ds) = mass_instance(seed, i);
        let check = verify_mass_concentration(&logits, &target, ds)?;
        if !check.passed {
            failures += 1;
        }
        max_err = max_err.max(check.closed_form_error());
    }
    Ok(MassSuiteReport {
        instances,
        seed,
        failures,
        max_closed_form_error: max_err,
    })
}
