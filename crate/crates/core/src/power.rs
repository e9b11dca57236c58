//! Closed-form power and sample-size planning for a prognostic-score
//! adjusted two-arm comparison with 1:1 allocation.
//!
//! The treatment-effect standard error for a total (pre-dropout) sample of
//! n is
//!
//! ```text
//! ν = sqrt( (2γσ)² · (1 − (λR)²) / (n(1 − d)) )
//! ```
//!
//! and two-sided power at level α for a target effect β is
//! `Φ(Φ⁻¹(α/2) + β/ν) + Φ(Φ⁻¹(α/2) − β/ν)`.

use serde::{Deserialize, Serialize};

use crate::distributions::{normal_cdf, normal_quantile};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Everything the power calculation needs except the sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningAssumptions<T> {
    /// Dropout proportion d in [0, 1).
    pub dropout: T,
    /// Standard-deviation inflation factor γ ≥ 1.
    pub gamma: T,
    /// Outcome standard deviation σ.
    pub sigma: T,
    /// Correlation deflation factor λ in [0, 1].
    pub lambda: T,
    /// Validated score-outcome correlation R.
    pub r: T,
    /// Two-sided type I error rate.
    pub alpha: T,
    /// Target treatment effect β.
    pub beta: T,
}

impl<T: Real> PlanningAssumptions<T> {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &'static str, ok: bool, v: T| {
            if ok {
                Ok(())
            } else {
                Err(Error::Range { name, message: format!("{v} is outside the admissible range") })
            }
        };
        let one = T::one();
        let zero = T::zero();
        range("dropout", self.dropout >= zero && self.dropout < one, self.dropout)?;
        range("gamma", self.gamma >= one && self.gamma.is_finite(), self.gamma)?;
        range("sigma", self.sigma > zero && self.sigma.is_finite(), self.sigma)?;
        range("lambda", self.lambda >= zero && self.lambda <= one, self.lambda)?;
        range("r", self.r >= -one && self.r <= one, self.r)?;
        range("alpha", self.alpha > zero && self.alpha < one, self.alpha)?;
        range("beta", self.beta.is_finite(), self.beta)?;
        Ok(())
    }

    pub fn with_n(self, n: T) -> PowerInputs<T> {
        PowerInputs { n, assumptions: self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerInputs<T> {
    /// Total sample size across both arms, before dropout.
    pub n: T,
    #[serde(flatten)]
    pub assumptions: PlanningAssumptions<T>,
}

impl<T: Real> PowerInputs<T> {
    pub fn validate(&self) -> Result<()> {
        self.assumptions.validate()?;
        let effective = self.n * (T::one() - self.assumptions.dropout);
        if !(effective >= T::lit(2.0)) || !self.n.is_finite() {
            return Err(Error::Range {
                name: "n",
                message: format!("n(1 − d) = {effective} must be at least 2"),
            });
        }
        Ok(())
    }
}

pub fn procova_standard_error<T: Real>(inputs: &PowerInputs<T>) -> Result<T> {
    inputs.validate()?;
    let a = &inputs.assumptions;
    let two = T::lit(2.0);
    let spread = two * a.gamma * a.sigma;
    let shrink = T::one() - (a.lambda * a.r).powi(2);
    let effective_n = inputs.n * (T::one() - a.dropout);
    Ok((spread * spread * shrink / effective_n).sqrt())
}

pub fn power_at<T: Real>(nu: T, beta: T, alpha: T) -> Result<T> {
    if !(nu > T::zero()) {
        return Err(Error::Range { name: "nu", message: format!("{nu} must be positive") });
    }
    let a = alpha.as_f64();
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::Range { name: "alpha", message: format!("{a} not in (0, 1)") });
    }
    let z = normal_quantile(a / 2.0);
    let shift = (beta / nu).as_f64();
    Ok(T::lit(normal_cdf(z + shift) + normal_cdf(z - shift)))
}

fn power_for_n<T: Real>(assumptions: &PlanningAssumptions<T>, n: usize) -> Result<T> {
    let inputs = assumptions.with_n(T::from_count(n));
    let nu = procova_standard_error(&inputs)?;
    power_at(nu, assumptions.beta, assumptions.alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint<T> {
    pub n: usize,
    pub power: T,
}

/// Power at n = start, start + step, …, ≤ end.
pub fn power_curve<T: Real>(
    assumptions: &PlanningAssumptions<T>,
    start: usize,
    end: usize,
    step: usize,
) -> Result<Vec<CurvePoint<T>>> {
    if step == 0 || start > end {
        return Err(Error::Range { name: "n_range", message: format!("{start}..={end} step {step} is empty") });
    }
    (start..=end)
        .step_by(step)
        .map(|n| Ok(CurvePoint { n, power: power_for_n(assumptions, n)? }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSize<T> {
    /// Smallest even total sample size reaching the target power.
    pub n: usize,
    pub nu: T,
    pub power: T,
}

const MAX_N: usize = 1_000_000_000;

pub fn min_sample_size<T: Real>(assumptions: &PlanningAssumptions<T>, target_power: T) -> Result<SampleSize<T>> {
    assumptions.validate()?;
    if !(target_power > assumptions.alpha && target_power < T::one()) {
        return Err(Error::Range {
            name: "target_power",
            message: format!("{target_power} must lie in (alpha, 1)"),
        });
    }
    let keep = 1.0 - assumptions.dropout.as_f64();
    let mut lo = ((2.0 / keep).ceil() as usize).max(2);
    lo += lo % 2;
    // bump past rounding at the boundary of n(1 − d) ≥ 2
    while assumptions.with_n(T::from_count(lo)).validate().is_err() {
        lo += 2;
    }
    let reaches = |n: usize| -> Result<bool> { Ok(power_for_n(assumptions, n)? >= target_power) };
    let result = |n: usize| -> Result<SampleSize<T>> {
        let nu = procova_standard_error(&assumptions.with_n(T::from_count(n)))?;
        Ok(SampleSize { n, nu, power: power_at(nu, assumptions.beta, assumptions.alpha)? })
    };
    if reaches(lo)? {
        return result(lo);
    }
    let mut hi = lo;
    loop {
        if hi >= MAX_N {
            return Err(Error::Capacity(format!("target power {target_power} not reachable with n ≤ {MAX_N}")));
        }
        hi = (hi * 2).min(MAX_N);
        if reaches(hi)? {
            break;
        }
    }
    // invariant: lo fails, hi reaches; both even
    while hi - lo > 2 {
        let mid = lo + ((hi - lo) / 4) * 2;
        if reaches(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // local scan guards against rounding at the boundary
    while hi > 2 && reaches(hi - 2)? {
        hi -= 2;
    }
    result(hi)
}

/// Sample size that powers every endpoint at once: the maximum of the
/// per-endpoint minima.
pub fn min_sample_size_coprimary<T: Real>(
    endpoints: &[PlanningAssumptions<T>],
    target_power: T,
) -> Result<SampleSize<T>> {
    let mut best: Option<SampleSize<T>> = None;
    for a in endpoints {
        let s = min_sample_size(a, target_power)?;
        if best.is_none_or(|b| s.n > b.n) {
            best = Some(s);
        }
    }
    best.ok_or_else(|| Error::Argument("no endpoints supplied".into()))
}

/// Fractional sample-size reduction (λR)² at fixed power.
pub fn reduction_fraction<T: Real>(lambda: T, r: T) -> Result<T> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::Range { name: "lambda", message: format!("{lambda} not in [0, 1]") });
    }
    if !(r.abs() <= T::one()) {
        return Err(Error::Range { name: "r", message: format!("{r} not in [-1, 1]") });
    }
    Ok((lambda * r).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn base() -> PlanningAssumptions<f64> {
        PlanningAssumptions { dropout: 0.1, gamma: 1.0, sigma: 2.0, lambda: 1.0, r: 0.0, alpha: 0.05, beta: 0.5 }
    }

    #[test]
    fn unadjusted_two_sample_se() {
        let inputs = base().with_n(200.0);
        assert_relative_eq!(procova_standard_error(&inputs).unwrap(), 2.0 * 2.0 / (180.0_f64).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn worked_standard_error() {
        let a = PlanningAssumptions { dropout: 0.1, gamma: 1.1, sigma: 2.0, lambda: 0.9, r: 0.5, alpha: 0.05, beta: 1.0 };
        // sqrt((4.84 * 4 / 90) * (1 - 0.2025)), evaluated independently
        assert_relative_eq!(procova_standard_error(&a.with_n(100.0)).unwrap(), 0.41418728989565956, epsilon = 1e-14);
    }

    #[test]
    fn doubling_effective_n_halves_variance() {
        let a = base();
        let v1 = procova_standard_error(&a.with_n(100.0)).unwrap().powi(2);
        let v2 = procova_standard_error(&a.with_n(200.0)).unwrap().powi(2);
        assert_relative_eq!(v2, v1 / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn power_identities() {
        assert_relative_eq!(power_at(0.3, 0.0, 0.05).unwrap(), 0.05, epsilon = 1e-12);
        assert_relative_eq!(power_at(1.0, 2.8016, 0.05).unwrap(), 0.80, epsilon = 1e-3);
        assert!(power_at(0.0, 1.0, 0.05).is_err());
        let mut last = 0.0;
        for k in 0..50 {
            let p = power_at(1.0, k as f64 * 0.1, 0.05).unwrap();
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn curve_counts_and_ordering() {
        let a = PlanningAssumptions { beta: 0.4, ..base() };
        let curve = power_curve(&a, 100, 1000, 100).unwrap();
        assert_eq!(curve.len(), 10);
        assert!(curve.windows(2).all(|w| w[1].power >= w[0].power));
        let adjusted = power_curve(&PlanningAssumptions { r: 0.391, ..a }, 100, 1000, 100).unwrap();
        assert!(adjusted.iter().zip(&curve).all(|(p, q)| p.power > q.power));
        assert!(power_curve(&a, 500, 100, 10).is_err());
    }

    #[test]
    fn minimal_sample_size_contract() {
        let a = PlanningAssumptions { beta: 0.8, ..base() };
        let s = min_sample_size(&a, 0.8).unwrap();
        assert_eq!(s.n % 2, 0);
        assert!(s.power >= 0.8);
        assert!(power_for_n(&a, s.n - 2).unwrap() < 0.8);
    }

    #[test]
    fn unadjusted_planning_matches_textbook_formula() {
        // n(1 − d) = 4σ²(z_{1−α/2} + z_{power})²/β² for the normal approximation
        let a = PlanningAssumptions { lambda: 0.0, r: 0.7, beta: 0.8, ..base() };
        let s = min_sample_size(&a, 0.8).unwrap();
        let z = normal_quantile(0.975) + normal_quantile(0.8);
        let textbook = 4.0 * 4.0 * z * z / 0.64 / 0.9;
        assert!((s.n as f64) >= textbook - 2.0 && (s.n as f64) <= textbook + 2.0, "{} vs {textbook}", s.n);
    }

    #[test]
    fn sample_size_scales_with_one_minus_r_squared() {
        let a = PlanningAssumptions { beta: 0.3, ..base() };
        let n0 = min_sample_size(&a, 0.9).unwrap().n as f64;
        let adj = PlanningAssumptions { r: 0.5, lambda: 0.9, ..a };
        let n1 = min_sample_size(&adj, 0.9).unwrap().n as f64;
        assert!((n1 / n0 - (1.0 - 0.2025)).abs() < 4.0 / n0);
    }

    #[test]
    fn coprimary_takes_max_and_capacity_error() {
        let a = PlanningAssumptions { beta: 0.8, ..base() };
        let b = PlanningAssumptions { beta: 0.5, ..base() };
        let both = min_sample_size_coprimary(&[a, b], 0.8).unwrap();
        assert_eq!(both.n, min_sample_size(&b, 0.8).unwrap().n);
        let hopeless = PlanningAssumptions { beta: 1e-6, ..base() };
        assert!(matches!(min_sample_size(&hopeless, 0.9), Err(Error::Capacity(_))));
    }

    #[test]
    fn reported_reduction_fractions() {
        for (r, pct) in [(0.267, 7.1), (0.361, 13.0), (0.391, 15.3)] {
            let f: f64 = reduction_fraction(1.0, r).unwrap() * 100.0;
            assert!((f - pct).abs() <= 0.1, "{r}: {f}");
        }
        assert!(reduction_fraction(1.2, 0.3).is_err());
    }

    #[test]
    fn range_checks() {
        let bad = [
            PlanningAssumptions { dropout: 1.0, ..base() },
            PlanningAssumptions { gamma: 0.9, ..base() },
            PlanningAssumptions { sigma: 0.0, ..base() },
            PlanningAssumptions { lambda: -0.1, ..base() },
            PlanningAssumptions { r: 1.5, ..base() },
            PlanningAssumptions { alpha: 0.0, ..base() },
        ];
        for a in bad {
            assert!(matches!(procova_standard_error(&a.with_n(100.0)), Err(Error::Range { .. })));
        }
        assert!(procova_standard_error(&base().with_n(2.0)).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let a = PlanningAssumptions::<f32> { dropout: 0.1, gamma: 1.0, sigma: 2.0, lambda: 1.0, r: 0.3, alpha: 0.05, beta: 0.5 };
        let s = min_sample_size(&a, 0.8).unwrap();
        let s64 = min_sample_size(&PlanningAssumptions { r: 0.3, ..base() }, 0.8).unwrap();
        assert!((s.n as i64 - s64.n as i64).abs() <= 2);
    }

    proptest! {
        #[test]
        fn power_monotone_in_each_input(n in 20.0f64..2000.0, d in 0.0f64..0.6, g in 1.0f64..2.0, lr in 0.0f64..0.9) {
            let a = PlanningAssumptions { dropout: d, gamma: g, sigma: 1.5, lambda: 1.0, r: lr, alpha: 0.05, beta: 0.4 };
            let pw = |a: &PlanningAssumptions<f64>, n: f64| power_at(procova_standard_error(&a.with_n(n)).unwrap(), a.beta, a.alpha).unwrap();
            let p = pw(&a, n);
            prop_assert!(pw(&a, n * 1.1) >= p);
            let more_dropout = PlanningAssumptions { dropout: d + 0.05, ..a };
            let inflated = PlanningAssumptions { gamma: g * 1.1, ..a };
            let stronger = PlanningAssumptions { r: lr + 0.05, ..a };
            prop_assert!(pw(&more_dropout, n) <= p);
            prop_assert!(pw(&inflated, n) <= p);
            prop_assert!(pw(&stronger, n) >= p);
        }

        #[test]
        fn min_sample_size_reaches_target(beta in 0.2f64..2.0, target in 0.5f64..0.95, r in 0.0f64..0.8) {
            let a = PlanningAssumptions { beta, r, ..base() };
            let s = min_sample_size(&a, target).unwrap();
            prop_assert!(power_for_n(&a, s.n).unwrap() >= target);
        }
    }
}
