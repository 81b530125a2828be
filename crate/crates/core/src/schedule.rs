//! Linear variance schedule and the flow-guidance ramp.
//!
//! Steps are numbered `1..=T` everywhere in the public API, matching the
//! usual diffusion notation. Arrays are stored 0-based and [`NoiseSchedule`]
//! does the `t - 1` conversion in one place ([`NoiseSchedule::index`]).

use crate::error::{Error, Result};
use crate::numerics::{lit, Grid, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    beta: Vec<S>,
    alpha: Vec<S>,
    alpha_bar: Vec<S>,
}

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// `beta` linearly spaced from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule<S: Scalar>(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule<S>> {
    if steps == 0 {
        return Err(Error::Domain("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Domain(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<S> = (0..steps)
        .map(|k| {
            if steps == 1 {
                lit(beta_start)
            } else {
                lit(beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64)
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn from_betas(beta: Vec<S>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > S::zero() && b < S::one())) {
            return Err(Error::Domain("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<S> = beta.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = S::one();
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Array index of step `t` (1-based).
    pub fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn betas(&self) -> &[S] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> S {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> S {
        self.alpha[t - 1]
    }

    /// Cumulative product up to and including step `t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> S {
        if t == 0 {
            S::one()
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Variance of the fixed reverse transition,
    /// `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`. Zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> S {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        (S::one() - ab_prev) / (S::one() - ab) * self.beta(t)
    }

    /// Closed-form forward process applied to a clean frame.
    pub fn noise(&self, x0: &Grid<S>, eps: &Grid<S>, t: usize) -> Result<Grid<S>> {
        self.index(t)?;
        let (a, b) = self.forward_coefficients(t);
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// Coefficients `(sqrt(abar_t), sqrt(1 - abar_t))` of the closed-form
    /// forward process `x_t = sqrt(abar) x0 + sqrt(1 - abar) eps`.
    pub fn forward_coefficients(&self, t: usize) -> (S, S) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (S::one() - ab).sqrt())
    }
}

/// Weight `((T - t) / T) * lambda_flow` applied to the flow loss at step `t`.
pub fn flow_ramp(t: usize, steps: usize, lambda_flow: f64) -> Result<f64> {
    if steps == 0 {
        return Err(Error::Domain("ramp needs at least one step".into()));
    }
    if t > steps {
        return Err(Error::Domain(format!("step {t} beyond {steps}")));
    }
    Ok((steps - t) as f64 / steps as f64 * lambda_flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = make_linear_schedule::<f64>(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bars(), &[0.9]);
    }

    #[test]
    fn two_steps() {
        let s = make_linear_schedule::<f64>(2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.63).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_matches_running_product() {
        let s = make_linear_schedule::<f64>(100, 1e-4, 0.02).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(100) - 0.02).abs() < 1e-15);
        // Independent product in a different order of operations.
        let mut prod = 1.0f64;
        for k in 0..100 {
            let b = 1e-4 + (0.02 - 1e-4) * (k as f64) / 99.0;
            prod *= 1.0 - b;
            assert!((s.alpha_bar(k + 1) - prod).abs() < 1e-12);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        // Frozen from the product above.
        assert!((s.alpha_bar(100) - 0.363_563_248_055_492).abs() < 1e-12, "{}", s.alpha_bar(100));
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(make_linear_schedule::<f64>(10, 0.0, 0.1).is_err());
        assert!(make_linear_schedule::<f64>(10, 0.2, 0.1).is_err());
        assert!(make_linear_schedule::<f64>(10, 0.1, 1.0).is_err());
        assert!(make_linear_schedule::<f64>(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn posterior_variance_vanishes_at_first_step() {
        let s = make_linear_schedule::<f64>(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.posterior_variance(1), 0.0);
        for t in 2..=100 {
            let v = s.posterior_variance(t);
            assert!(v > 0.0 && v < s.beta(t));
        }
    }

    #[test]
    fn ramp_values() {
        assert_eq!(flow_ramp(100, 100, 500.0).unwrap(), 0.0);
        assert_eq!(flow_ramp(0, 100, 500.0).unwrap(), 500.0);
        assert_eq!(flow_ramp(50, 100, 500.0).unwrap(), 250.0);
        assert!(flow_ramp(101, 100, 500.0).is_err());
        for t in 0..100 {
            assert!(flow_ramp(t, 100, 500.0).unwrap() >= flow_ramp(t + 1, 100, 500.0).unwrap());
        }
    }

    #[test]
    fn generic_over_f32() {
        let s = make_linear_schedule::<f32>(2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bar(2) - 0.63).abs() < 1e-6);
    }
}
