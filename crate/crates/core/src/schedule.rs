//! Noise schedules and the forward (noising) process.
//!
//! The corruption model is the discrete variance-preserving process
//! `x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps`, where
//! `alpha_t = 1 - beta_t` and `abar_t` is the running product of `alpha`
//! over steps `1..=t`, with the convention `abar_0 = 1`.

use serde::{Deserialize, Serialize};

use crate::datacore::Grid;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The defining parameters of a linear schedule; embedded in artifacts so a
/// loaded model can be checked against the schedule it was trained under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec<S> {
    pub steps: usize,
    pub beta_start: S,
    pub beta_end: S,
}

/// Precomputed per-step quantities of a linear-beta schedule.
///
/// Steps are 1-based: `beta(1)` is the first corruption step. `alpha_bar` is
/// additionally defined at 0, where it is exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    spec: ScheduleSpec<S>,
    beta: Vec<S>,
    alpha: Vec<S>,
    /// `alpha_bar[t]` for `t = 0..=steps`; `alpha_bar[0] == 1`.
    alpha_bar: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Build a schedule with `beta` linearly interpolated from `beta_start`
    /// to `beta_end` inclusive over `steps` steps.
    pub fn linear(steps: usize, beta_start: S, beta_end: S) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > S::zero() && beta_start <= beta_end && beta_end < S::one()) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut beta = Vec::with_capacity(steps);
        for t in 0..steps {
            let frac = if steps == 1 {
                S::zero()
            } else {
                S::cast(t as f64) / S::cast((steps - 1) as f64)
            };
            beta.push(beta_start + (beta_end - beta_start) * frac);
        }
        let alpha: Vec<S> = beta.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(S::one());
        let mut prod = S::one();
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            spec: ScheduleSpec {
                steps,
                beta_start,
                beta_end,
            },
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn from_spec(spec: &ScheduleSpec<S>) -> Result<Self> {
        NoiseSchedule::linear(spec.steps, spec.beta_start, spec.beta_end)
    }

    pub fn spec(&self) -> &ScheduleSpec<S> {
        &self.spec
    }

    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    /// `beta_t` for `1 <= t <= steps`. Panics out of range.
    pub fn beta(&self, t: usize) -> S {
        assert!(
            (1..=self.steps()).contains(&t),
            "step {t} outside 1..={}",
            self.steps()
        );
        self.beta[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for `1 <= t <= steps`. Panics out of range.
    pub fn alpha(&self, t: usize) -> S {
        assert!(
            (1..=self.steps()).contains(&t),
            "step {t} outside 1..={}",
            self.steps()
        );
        self.alpha[t - 1]
    }

    /// `abar_t` for `0 <= t <= steps`; `abar_0 == 1`. Panics out of range.
    pub fn alpha_bar(&self, t: usize) -> S {
        assert!(t <= self.steps(), "step {t} outside 0..={}", self.steps());
        self.alpha_bar[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "step {t} outside valid range 1..={}",
                self.steps()
            )))
        }
    }
}

/// Apply the forward process at step `t` to `x0` with the given noise draw.
pub fn forward_diffuse<S: Scalar>(
    x0: &Grid<S>,
    t: usize,
    noise: &Grid<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<Grid<S>> {
    schedule.check_step(t)?;
    let abar = schedule.alpha_bar(t);
    let signal = abar.sqrt();
    let spread = (S::one() - abar).sqrt();
    x0.zip_map(noise, |x, e| signal * x + spread * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn linear_schedule_hits_both_endpoints() {
        let s: NoiseSchedule<f64> = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_relative_eq!(s.beta(1), 1e-4);
        assert_relative_eq!(s.beta(1000), 0.02);
        // Interior step of the inclusive interpolation.
        assert_relative_eq!(s.beta(500), 1e-4 + (0.02 - 1e-4) * 499.0 / 999.0);
    }

    #[test]
    fn single_step_schedule_uses_beta_start() {
        let s: NoiseSchedule<f64> = NoiseSchedule::linear(1, 0.1, 0.5).unwrap();
        assert_eq!(s.beta(1), 0.1);
        assert_relative_eq!(s.alpha_bar(1), 0.9);
    }

    #[test]
    fn alpha_bar_starts_at_one_and_matches_a_direct_product() {
        let s: NoiseSchedule<f64> = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        let mut prod = 1.0;
        for t in 1..=100 {
            prod *= 1.0 - s.beta(t);
            assert_relative_eq!(s.alpha_bar(t), prod, max_relative = 1e-14);
        }
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(NoiseSchedule::<f64>::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_matches_elementwise_formula() {
        let s: NoiseSchedule<f64> = NoiseSchedule::linear(50, 1e-3, 0.1).unwrap();
        let x0 = Grid::new(2, 1, 1, vec![0.3, 0.9]).unwrap();
        let eps = Grid::new(2, 1, 1, vec![-1.2, 0.4]).unwrap();
        let t = 17;
        let out = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let abar = s.alpha_bar(t);
        for i in 0..2 {
            assert_relative_eq!(
                out.data()[i],
                abar.sqrt() * x0.data()[i] + (1.0 - abar).sqrt() * eps.data()[i]
            );
        }
    }

    #[test]
    fn forward_diffuse_rejects_bad_step_and_shape() {
        let s: NoiseSchedule<f64> = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let x0 = Grid::<f64>::zeros(2, 2, 1).unwrap();
        let eps = Grid::<f64>::zeros(2, 2, 1).unwrap();
        assert!(forward_diffuse(&x0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 11, &eps, &s).is_err());
        let bad = Grid::<f64>::zeros(3, 2, 1).unwrap();
        assert!(forward_diffuse(&x0, 5, &bad, &s).is_err());
    }

    /// At the far end of a strong schedule the marginal of `x_t` should be
    /// close to standard normal regardless of `x_0`.
    #[test]
    fn terminal_marginal_is_nearly_standard_normal() {
        let s: NoiseSchedule<f64> = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000) < 5e-3, "abar_T = {}", s.alpha_bar(1000));

        let mut rng = rng_from_seed(77);
        let x0 = Grid::filled(100, 100, 1, 0.5).unwrap();
        let n = 10;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        for _ in 0..n {
            let eps = Grid::standard_normal(100, 100, 1, &mut rng).unwrap();
            let xt = forward_diffuse(&x0, 1000, &eps, &s).unwrap();
            for &v in xt.data() {
                sum += v;
                sumsq += v * v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sumsq / count as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    proptest! {
        /// `alpha_bar` is strictly decreasing over 0..=steps and stays in (0, 1].
        #[test]
        fn alpha_bar_strictly_decreasing(
            steps in 1usize..200,
            start_mill in 1u32..100,
            extra_mill in 0u32..400,
        ) {
            let beta_start = start_mill as f64 / 1000.0;
            let beta_end = beta_start + extra_mill as f64 / 1000.0;
            prop_assume!(beta_end < 1.0);
            let s: NoiseSchedule<f64> = NoiseSchedule::linear(steps, beta_start, beta_end).unwrap();
            for t in 1..=steps {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                prop_assert!(s.alpha_bar(t) > 0.0);
            }
            prop_assert_eq!(s.alpha_bar(0), 1.0);
        }
    }
}
