//! Calibration of the scalar Gaussian mechanism.
//!
//! The calibrated variance `sigma2_eps_delta` is the smallest variance
//! `s^2` for which the analytic Gaussian condition
//!
//! ```text
//! Phi(1/(2s) - eps*s) - e^eps * Phi(-1/(2s) - eps*s) <= delta
//! ```
//!
//! holds. This is the unit-sensitivity normalisation: every optimal
//! parameter and MSE in the crate is expressed in multiples of this value.
//! [`analytic_gap`] exposes the general form with an explicit sensitivity;
//! scaling the sensitivity by `k` scales the calibrated standard deviation
//! by exactly `k`.

use crate::error::{Error, Result};
use alloc::format;
use core::f64::consts::{FRAC_1_SQRT_2, PI};

/// Relative bracket width at which bisection stops.
pub const DEFAULT_TOL: f64 = 1e-6;

const BRACKET_LO: f64 = 1e-6;
const BRACKET_HI: f64 = 1e6;
const BRACKET_LIMIT_LO: f64 = 1e-12;
const BRACKET_LIMIT_HI: f64 = 1e12;

/// An `(epsilon, delta)` privacy budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Result of [`sigma_eps_delta`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedVariance {
    /// Calibrated variance (not standard deviation).
    pub sigma2_eps_delta: f64,
    /// Value of [`gaussian_dp_gap`] at the returned scale; never above delta.
    pub achieved_gap: f64,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Natural log of the standard normal CDF, accurate far into the lower tail.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return libm::log(normal_cdf(x));
    }
    // Asymptotic series of the Mills ratio; four terms are exact to
    // double precision once x < -30.
    let x2 = x * x;
    let inv = 1.0 / x2;
    let series = 1.0 - inv + 3.0 * inv * inv - 15.0 * inv * inv * inv;
    -0.5 * x2 - libm::log(-x) - 0.5 * libm::log(2.0 * PI) + libm::log(series)
}

/// Analytic Gaussian-mechanism gap for a query of L2 sensitivity
/// `sensitivity` perturbed by noise of standard deviation `sigma`.
pub fn analytic_gap(sigma: f64, epsilon: f64, sensitivity: f64) -> Result<f64> {
    if !(sigma.is_finite() && epsilon.is_finite() && sensitivity.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite argument: sigma={sigma}, epsilon={epsilon}, sensitivity={sensitivity}"
        )));
    }
    if sigma <= 0.0 || epsilon <= 0.0 || sensitivity <= 0.0 {
        return Err(Error::Domain(format!(
            "arguments must be positive: sigma={sigma}, epsilon={epsilon}, sensitivity={sensitivity}"
        )));
    }
    let a = sensitivity / (2.0 * sigma);
    let b = epsilon * sigma / sensitivity;
    let head = normal_cdf(a - b);
    let tail = if epsilon > 30.0 {
        libm::exp(epsilon + log_normal_cdf(-a - b))
    } else {
        libm::exp(epsilon) * normal_cdf(-a - b)
    };
    Ok(head - tail)
}

/// Gap of the unit-sensitivity Gaussian mechanism at standard deviation
/// `sigma`. Strictly decreasing in `sigma`, from 1 at `0+` to 0 at infinity.
pub fn gaussian_dp_gap(sigma: f64, epsilon: f64) -> Result<f64> {
    analytic_gap(sigma, epsilon, 1.0)
}

/// Smallest variance meeting the budget, found by bisection on the
/// standard deviation. `tol` is the relative bracket width at termination.
pub fn sigma_eps_delta(budget: &PrivacyBudget, tol: f64) -> Result<CalibratedVariance> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let (eps, delta) = (budget.epsilon(), budget.delta());
    let excess = |s: f64| gaussian_dp_gap(s, eps).map(|g| g - delta);

    let mut lo = BRACKET_LO;
    while excess(lo)? <= 0.0 {
        lo /= 10.0;
        if lo < BRACKET_LIMIT_LO {
            return Err(Error::Calibration(format!(
                "gap stays below delta={delta} down to sigma={lo}"
            )));
        }
    }
    let mut hi = BRACKET_HI;
    while excess(hi)? > 0.0 {
        hi *= 10.0;
        if hi > BRACKET_LIMIT_HI {
            return Err(Error::Calibration(format!(
                "gap stays above delta={delta} up to sigma={hi}"
            )));
        }
    }

    // Invariant: excess(lo) > 0 >= excess(hi).
    while hi - lo > tol * hi {
        // Geometric midpoint while the bracket spans decades.
        let mid = if hi > 4.0 * lo { libm::sqrt(lo * hi) } else { 0.5 * (lo + hi) };
        if excess(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(CalibratedVariance {
        sigma2_eps_delta: hi * hi,
        achieved_gap: gaussian_dp_gap(hi, eps)?,
    })
}

/// [`sigma_eps_delta`] at [`DEFAULT_TOL`], returning just the variance.
pub fn calibrated_variance(budget: &PrivacyBudget) -> Result<f64> {
    sigma_eps_delta(budget, DEFAULT_TOL).map(|c| c.sigma2_eps_delta)
}

/// Closed-form upper bound on the calibrated variance.
///
/// For `epsilon < 1` this is the classical `8 ln(1.25/delta) / epsilon^2`;
/// for `epsilon >= 1` it is `2 eta^2 / epsilon`.
pub fn sigma_upper_bound(budget: &PrivacyBudget) -> f64 {
    let (eps, delta) = (budget.epsilon(), budget.delta());
    if eps < 1.0 {
        8.0 * libm::log(1.25 / delta) / (eps * eps)
    } else {
        let eta = if delta <= 0.05 {
            1.0 + 2.0 * libm::sqrt(libm::log(1.0 / (2.0 * delta)))
        } else {
            1.0 + 2.0 * libm::sqrt(libm::log(10.0))
        };
        2.0 * eta * eta / eps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn budget(e: f64, d: f64) -> PrivacyBudget {
        PrivacyBudget::new(e, d).unwrap()
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(0.0, 0.1).is_err());
        assert!(PrivacyBudget::new(-1.0, 0.1).is_err());
        assert!(PrivacyBudget::new(1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(f64::NAN, 0.1).is_err());
        assert!(PrivacyBudget::new(1.0, 0.5).is_ok());
    }

    #[test]
    fn gap_limits() {
        assert!((gaussian_dp_gap(1e-9, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(gaussian_dp_gap(1e6, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gap_rejects_bad_input() {
        assert!(gaussian_dp_gap(f64::NAN, 1.0).is_err());
        assert!(gaussian_dp_gap(1.0, f64::INFINITY).is_err());
        assert!(gaussian_dp_gap(0.0, 1.0).is_err());
        assert!(gaussian_dp_gap(1.0, -1.0).is_err());
    }

    #[test]
    fn gap_at_reference_scale() {
        let g = gaussian_dp_gap(libm::sqrt(3.975), 2.0).unwrap();
        assert!((g - 1e-5).abs() < 1e-7, "gap {g}");
    }

    #[test]
    fn log_cdf_matches_direct_evaluation_where_both_work() {
        for x in [-5.0, -12.0, -25.0, -29.9] {
            let direct = libm::log(normal_cdf(x));
            assert!((log_normal_cdf(x) - direct).abs() < 1e-10 * direct.abs());
        }
        // continuity across the switch to the asymptotic series
        let below = log_normal_cdf(-30.0 - 1e-9);
        let above = log_normal_cdf(-30.0 + 1e-9);
        assert!((below - above).abs() < 1e-6);
    }

    #[test]
    fn large_epsilon_uses_log_space_without_overflow() {
        let g = gaussian_dp_gap(0.05, 40.0).unwrap();
        assert!(g.is_finite() && (0.0..=1.0).contains(&g));
        let c = sigma_eps_delta(&budget(50.0, 1e-6), DEFAULT_TOL).unwrap();
        assert!(c.sigma2_eps_delta.is_finite() && c.sigma2_eps_delta > 0.0);
    }

    #[test]
    fn calibration_anchor() {
        let c = sigma_eps_delta(&budget(2.0, 1e-5), DEFAULT_TOL).unwrap();
        assert!((c.sigma2_eps_delta - 3.975).abs() < 0.005, "{c:?}");
        assert!(c.achieved_gap <= 1e-5);
        assert!(c.achieved_gap > 1e-5 * (1.0 - 1e-4));
    }

    #[test]
    fn calibration_matches_grid_scan() {
        // Independent oracle: smallest grid sigma at resolution 1e-4 whose
        // gap is at most delta.
        let (eps, delta) = (1.0, 1e-5);
        let mut s = 1e-4;
        while gaussian_dp_gap(s, eps).unwrap() > delta {
            s += 1e-4;
        }
        let c = sigma_eps_delta(&budget(eps, delta), 1e-9).unwrap();
        let sigma = libm::sqrt(c.sigma2_eps_delta);
        assert!(sigma <= s && s - sigma <= 1e-4 + 1e-9, "bisection {sigma}, grid {s}");
    }

    #[test]
    fn sensitivity_scaling() {
        let b = budget(1.5, 1e-6);
        let unit = calibrated_variance(&b).unwrap();
        // Calibrate the two-sensitivity form by hand through analytic_gap.
        let (mut lo, mut hi) = (1e-3, 1e3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if analytic_gap(mid, 1.5, 2.0).unwrap() > 1e-6 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((hi * hi / unit - 4.0).abs() < 1e-5);
    }

    #[test]
    fn upper_bound_examples() {
        let b = budget(0.5, 0.01);
        assert!((sigma_upper_bound(&b) - 8.0 * libm::log(125.0) / 0.25).abs() < 1e-12);
        let b = budget(2.0, 1e-5);
        let eta = 1.0 + 2.0 * libm::sqrt(libm::log(50000.0));
        assert!((sigma_upper_bound(&b) - 2.0 * eta * eta / 2.0).abs() < 1e-12);
        let b = budget(3.0, 0.2);
        let eta = 1.0 + 2.0 * libm::sqrt(libm::log(10.0));
        assert!((sigma_upper_bound(&b) - 2.0 * eta * eta / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gap_is_strictly_decreasing_on_log_grid() {
        for eps in [0.1, 1.0, 2.0, 8.0] {
            let mut prev = f64::INFINITY;
            let mut s = 1e-3;
            while s < 1e2 {
                let g = gaussian_dp_gap(s, eps).unwrap();
                // Strict only where the gap is representable away from 0 and 1.
                if g > 1e-300 && g < 1.0 - 1e-15 {
                    assert!(g < prev, "eps={eps} s={s}: {g} !< {prev}");
                } else {
                    assert!(g <= prev);
                }
                prev = g;
                s *= 1.05;
            }
        }
    }

    #[test]
    fn bad_tolerance() {
        assert!(sigma_eps_delta(&budget(1.0, 1e-5), 0.0).is_err());
        assert!(sigma_eps_delta(&budget(1.0, 1e-5), f64::NAN).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn bound_dominates(eps in 0.1f64..10.0, log_delta in -8.0f64..(0.5f64).log10()) {
            let b = budget(eps, 10f64.powf(log_delta));
            let exact = calibrated_variance(&b).unwrap();
            prop_assert!(exact <= sigma_upper_bound(&b));
        }

        #[test]
        fn monotone_in_delta_and_epsilon(
            eps in 0.1f64..10.0,
            d1 in -8.0f64..-0.5,
            d2 in -8.0f64..-0.5,
            scale in 1.0f64..3.0,
        ) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let a = calibrated_variance(&budget(eps, 10f64.powf(lo))).unwrap();
            let b = calibrated_variance(&budget(eps, 10f64.powf(hi))).unwrap();
            prop_assert!(a >= b * (1.0 - 1e-5));
            let c = calibrated_variance(&budget(eps * scale, 10f64.powf(lo))).unwrap();
            prop_assert!(c <= a * (1.0 + 1e-5));
        }
    }
}
