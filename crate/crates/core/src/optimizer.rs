//! Optimal exchangeable noise parameters and decoders.
//!
//! Noise is exchangeable across users: every user has variance `sigma2`,
//! every pair has covariance `r = rho * sigma2`, and coordinates are
//! independent. Throughout, `s` denotes the calibrated variance from
//! [`crate::calibration`].

use crate::calibration::{calibrated_variance, PrivacyBudget};
use crate::error::{Error, Result};
use alloc::format;
use alloc::vec::Vec;

/// Population, thresholds and dimension of a mean-estimation round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemConfig {
    n: usize,
    t: usize,
    c: usize,
    d: usize,
}

impl SystemConfig {
    /// `n` users, at least `t` respond, at most `c` collude, vectors in `R^d`.
    pub fn new(n: usize, t: usize, c: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Config(format!("n and d must be positive (n={n}, d={d})")));
        }
        if t == 0 || t > n {
            return Err(Error::Config(format!("need 1 <= t <= n (t={t}, n={n})")));
        }
        if c >= t {
            return Err(Error::Config(format!("need c < t (c={c}, t={t})")));
        }
        Ok(Self { n, t, c, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn d(&self) -> usize {
        self.d
    }
}

/// Parameters of the exchangeable Gaussian noise distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseParams {
    /// Finite per-user variance and pairwise correlation.
    Finite { sigma2: f64, rho: f64 },
    /// The `sigma2 -> infinity` optimum of a round without dropouts.
    /// `rho` is the limiting correlation `-1/(n-1)` and
    /// `effective_variance` the limit of `sigma2 * (1 + rho * (n-1))`.
    Limit { n: usize, rho: f64, effective_variance: f64 },
}

impl NoiseParams {
    /// Finite parameters. `sigma2 = 0` is accepted for noiseless debugging.
    pub fn finite(sigma2: f64, rho: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(Error::Domain(format!("sigma2 must be finite and >= 0, got {sigma2}")));
        }
        if !(rho.is_finite() && (-1.0..=1.0).contains(&rho)) {
            return Err(Error::Domain(format!("rho must lie in [-1, 1], got {rho}")));
        }
        Ok(NoiseParams::Finite { sigma2, rho })
    }

    /// Limit-mode parameters for `n` users and `c` colluders.
    pub fn limit(n: usize, c: usize, sigma2_eps_delta: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!("limit mode needs n >= 2, got {n}")));
        }
        Ok(NoiseParams::Limit {
            n,
            rho: -1.0 / (n - 1) as f64,
            effective_variance: limit_effective_variance(n, c, sigma2_eps_delta)?,
        })
    }

    pub fn rho(&self) -> f64 {
        match *self {
            NoiseParams::Finite { rho, .. } | NoiseParams::Limit { rho, .. } => rho,
        }
    }

    /// `None` in limit mode.
    pub fn sigma2(&self) -> Option<f64> {
        match *self {
            NoiseParams::Finite { sigma2, .. } => Some(sigma2),
            NoiseParams::Limit { .. } => None,
        }
    }

    pub fn is_limit(&self) -> bool {
        matches!(self, NoiseParams::Limit { .. })
    }

    /// Off-diagonal covariance `r = rho * sigma2`; `None` in limit mode.
    pub fn covariance(&self) -> Option<f64> {
        self.sigma2().map(|s2| s2 * self.rho())
    }

    /// Checks that the n-user covariance is positive semidefinite.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        match *self {
            NoiseParams::Finite { sigma2, rho } => {
                let lead = sigma2 * (1.0 + rho * (n as f64 - 1.0));
                let rest = sigma2 * (1.0 - rho);
                if lead < -1e-12 * sigma2 || rest < 0.0 {
                    return Err(Error::Domain(format!(
                        "(sigma2={sigma2}, rho={rho}) is not a valid covariance for n={n}"
                    )));
                }
                Ok(())
            }
            NoiseParams::Limit { n: ln, .. } if ln == n => Ok(()),
            NoiseParams::Limit { n: ln, .. } => Err(Error::Domain(format!(
                "limit parameters built for n={ln}, used with n={n}"
            ))),
        }
    }
}

/// Decoder kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    /// Common shrinkage weight minimising the MSE.
    BiasedOptimal,
    /// Plain average of the responses.
    Unbiased,
}

/// Common weight the server applies to every response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderWeights {
    pub alpha: f64,
    pub u_size: usize,
}

/// Per-coordinate variance of the noise sum over `u_size` users divided by
/// `u_size`, i.e. `sigma2 * (1 + rho * (u_size - 1))`.
pub fn effective_aggregate_variance(params: &NoiseParams, u_size: usize) -> Result<f64> {
    if u_size == 0 {
        return Err(Error::Domain("u_size must be >= 1".into()));
    }
    match *params {
        NoiseParams::Finite { sigma2, rho } => {
            let v = sigma2 * (1.0 + rho * (u_size as f64 - 1.0));
            // Round-off at the perfect-cancellation boundary.
            Ok(if v < 0.0 && v > -1e-12 * sigma2 { 0.0 } else { v })
                .and_then(|v| {
                    if v < 0.0 {
                        Err(Error::Domain(format!(
                            "negative aggregate variance {v} for u_size={u_size}"
                        )))
                    } else {
                        Ok(v)
                    }
                })
        }
        NoiseParams::Limit { n, effective_variance, .. } => {
            if u_size == n {
                Ok(effective_variance)
            } else {
                Err(Error::Unsupported(format!(
                    "limit-mode noise leaves infinite residual variance when only {u_size} of {n} users respond"
                )))
            }
        }
    }
}

/// Limit of `sigma2 + r*(sigma2) * (n-1)` as `sigma2` grows without bound,
/// with `r` at the lower end of the feasible range: `s / (n - c)`.
pub fn limit_effective_variance(n: usize, c: usize, sigma2_eps_delta: f64) -> Result<f64> {
    if c + 1 >= n {
        return Err(Error::Unsupported(format!(
            "c={c} >= n-1={}: collusion leaves only independent noise (use the LDP point)",
            n.saturating_sub(1)
        )));
    }
    Ok(sigma2_eps_delta / (n - c) as f64)
}

/// Admissible covariances `r` at a fixed `sigma2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibleRange {
    pub lower: f64,
    /// `None` for a half-line.
    pub upper: Option<f64>,
}

impl FeasibleRange {
    pub fn contains(&self, r: f64) -> bool {
        r >= self.lower && self.upper.is_none_or(|u| r <= u)
    }
}

fn check_counts(n: usize, c: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Domain(format!("need n >= 2, got {n}")));
    }
    if c >= n {
        return Err(Error::Domain(format!("need c < n (c={c}, n={n})")));
    }
    Ok(())
}

/// Set of `r` satisfying the privacy constraint against `c` colluders.
///
/// The constraint is the quadratic
/// `A r^2 + B r + C >= 0` with `A = (n-1)(c-1)`,
/// `B = sigma2 (n+c-2) - s (n-2)` and `C = sigma2 (sigma2 - s)`.
/// For `c = 0` it holds on the closed interval between the roots, for
/// `c = 1` on a half-line, and for `c > 1` above the larger root (the
/// branch below the smaller root is not a valid covariance).
pub fn feasible_rho_range(
    n: usize,
    c: usize,
    sigma2: f64,
    sigma2_eps_delta: f64,
) -> Result<FeasibleRange> {
    check_counts(n, c)?;
    let s = sigma2_eps_delta;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Domain(format!("calibrated variance must be positive, got {s}")));
    }
    if !(sigma2 >= s) {
        return Err(Error::Infeasible(format!(
            "sigma2={sigma2} is below the calibrated variance {s}"
        )));
    }
    let nf = n as f64;
    let cf = c as f64;
    let gap = sigma2 - s;
    match c {
        0 => {
            let a = (nf - 2.0) * gap / (2.0 * (nf - 1.0));
            let b = libm::sqrt(
                (nf - 2.0) * (nf - 2.0) * gap * gap + 4.0 * (nf - 1.0) * sigma2 * gap,
            ) / (2.0 * (nf - 1.0));
            // a - b without cancellation: (a^2 - b^2) / (a + b).
            let lower = if a + b > 0.0 {
                -sigma2 * gap / ((nf - 1.0) * (a + b))
            } else {
                0.0
            };
            Ok(FeasibleRange { lower, upper: Some(a + b) })
        }
        1 => {
            let denom = sigma2 * (nf - 1.0) - s * (nf - 2.0);
            Ok(FeasibleRange { lower: -sigma2 * gap / denom, upper: None })
        }
        _ => {
            let qa = (nf - 1.0) * (cf - 1.0);
            let qb = sigma2 * (nf + cf - 2.0) - s * (nf - 2.0);
            let qc = sigma2 * gap;
            let u = (nf - 2.0) * gap - sigma2 * cf;
            let disc = u * u + 4.0 * (nf - cf - 1.0) * sigma2 * gap;
            let root = libm::sqrt(disc);
            // Larger root of qa r^2 + qb r + qc, in the stable form when qb > 0.
            let lower = if qb > 0.0 {
                if qb + root > 0.0 {
                    -2.0 * qc / (qb + root)
                } else {
                    0.0
                }
            } else {
                (-qb + root) / (2.0 * qa)
            };
            Ok(FeasibleRange { lower, upper: None })
        }
    }
}

/// Conditional variance of an honest user's response given everything else
/// the server sees, with `c` colluders:
/// `(sigma2 + r(c-1)) (sigma2 + r(n-1)) / (sigma2 + r(n-2))`.
pub fn conditional_variance(n: usize, c: usize, sigma2: f64, r: f64) -> Result<f64> {
    check_counts(n, c)?;
    let nf = n as f64;
    let cf = c as f64;
    let denom = sigma2 + r * (nf - 2.0);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::Domain(format!(
            "sigma2 + r(n-2) = {denom} must be positive"
        )));
    }
    Ok((sigma2 + r * (cf - 1.0)) * (sigma2 + r * (nf - 1.0)) / denom)
}

/// Conditional variance minus the calibrated variance. Non-negative exactly
/// when `(sigma2, r)` meets the privacy constraint.
pub fn privacy_margin(n: usize, c: usize, sigma2: f64, r: f64, sigma2_eps_delta: f64) -> Result<f64> {
    Ok(conditional_variance(n, c, sigma2, r)? - sigma2_eps_delta)
}

/// Optimal variance for a round that tolerates dropouts (`c < t < n`).
fn optimal_sigma2_with_dropouts(n: usize, t: usize, c: usize, s: f64) -> f64 {
    let (nf, tf, cf) = (n as f64, t as f64, c as f64);
    let nc = nf - cf;
    let base = s * (nf * nf - 2.0 * nf - cf * nf + 2.0) / (nc * nc);
    let num = s * (nf - cf - 1.0) * (nf + cf - 2.0 * nf * cf + tf * (nf + cf - 2.0));
    let den = nc * nc * libm::sqrt((tf - cf) * (nf - tf) * (nf - cf - 1.0));
    base + num / den
}

/// Optimal correlation at variance `sigma2`, written in terms of
/// `k = 1 - s / sigma2`.
pub fn optimal_rho_at(n: usize, c: usize, sigma2: f64, s: f64) -> f64 {
    let (nf, cf) = (n as f64, c as f64);
    if c == 1 {
        return -(sigma2 - s) / (sigma2 * (nf - 1.0) - s * (nf - 2.0));
    }
    let k = 1.0 - s / sigma2;
    let u = (nf - 2.0) * k - cf;
    let root = libm::sqrt(u * u + 4.0 * (nf - cf - 1.0) * k);
    let b = (nf - 2.0) * k + cf;
    // (-b + root) / (2 (n-1)(c-1)) rewritten without the cancellation.
    if b + root > 0.0 {
        -2.0 * k / (b + root)
    } else {
        0.0
    }
}

/// Optimal noise parameters for `cfg` given the calibrated variance.
///
/// * `c = n - 1`: independent noise at the calibrated variance.
/// * `t = n`: limit mode (variance grows without bound).
/// * otherwise the closed-form finite optimum.
pub fn optimal_params_for(cfg: &SystemConfig, sigma2_eps_delta: f64) -> Result<NoiseParams> {
    let (n, t, c) = (cfg.n, cfg.t, cfg.c);
    let s = sigma2_eps_delta;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Domain(format!("calibrated variance must be positive, got {s}")));
    }
    if c + 1 == n {
        return NoiseParams::finite(s, 0.0);
    }
    if t == n {
        return NoiseParams::limit(n, c, s);
    }
    // At t = 1 the closed form equals s up to round-off.
    let sigma2 = optimal_sigma2_with_dropouts(n, t, c, s).max(s);
    NoiseParams::finite(sigma2, optimal_rho_at(n, c, sigma2, s))
}

/// Calibrates the budget and returns the optimal parameters.
pub fn optimal_params(cfg: &SystemConfig, budget: &PrivacyBudget) -> Result<NoiseParams> {
    optimal_params_for(cfg, calibrated_variance(budget)?)
}

/// Decoder weight for `u_size` responses.
pub fn optimal_decoder(
    u_size: usize,
    d: usize,
    params: &NoiseParams,
    kind: EstimatorKind,
) -> Result<DecoderWeights> {
    let v = effective_aggregate_variance(params, u_size)?;
    let alpha = match kind {
        EstimatorKind::Unbiased => 1.0,
        EstimatorKind::BiasedOptimal => 1.0 / (1.0 + d as f64 * v / u_size as f64),
    };
    Ok(DecoderWeights { alpha, u_size })
}

/// Worst-case (over unit-ball inputs) MSE with `u_size` responses.
pub fn analytic_mse(u_size: usize, d: usize, params: &NoiseParams, kind: EstimatorKind) -> Result<f64> {
    let v = effective_aggregate_variance(params, u_size)?;
    let (u, d) = (u_size as f64, d as f64);
    Ok(match kind {
        EstimatorKind::Unbiased => d * v / u,
        EstimatorKind::BiasedOptimal => {
            if v == 0.0 {
                0.0
            } else {
                1.0 / (1.0 + (u / d) / v)
            }
        }
    })
}

/// MSE of an arbitrary common weight `alpha`: `(alpha-1)^2 + d alpha^2 V / u`.
pub fn mse_at_weight(alpha: f64, u_size: usize, d: usize, params: &NoiseParams) -> Result<f64> {
    let v = effective_aggregate_variance(params, u_size)?;
    Ok((alpha - 1.0) * (alpha - 1.0) + d as f64 * alpha * alpha * v / u_size as f64)
}

/// Largest MSE over responding-set sizes and where it is attained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCase {
    pub mse: f64,
    pub u_size: usize,
}

/// Maximum of [`analytic_mse`] over `u_size` in `[t, n]` by exhaustive scan.
pub fn worst_case_mse(cfg: &SystemConfig, params: &NoiseParams, kind: EstimatorKind) -> Result<WorstCase> {
    params.validate_for(cfg.n)?;
    let mut worst = WorstCase { mse: f64::NEG_INFINITY, u_size: cfg.t };
    for u in cfg.t..=cfg.n {
        let m = analytic_mse(u, cfg.d, params, kind)?;
        if m > worst.mse {
            worst = WorstCase { mse: m, u_size: u };
        }
    }
    Ok(worst)
}

/// Resolution of the brute-force oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub sigma_steps: usize,
    pub rho_steps: usize,
    /// Largest variance scanned, as a multiple of the calibrated variance.
    pub sigma_cap_multiplier: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { sigma_steps: 400, rho_steps: 400, sigma_cap_multiplier: 20.0 }
    }
}

/// Best grid point found by [`grid_oracle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOptimum {
    pub params: NoiseParams,
    pub mse: f64,
    /// Spacing of the variance axis.
    pub sigma2_cell: f64,
    /// Spacing of the correlation axis at the winning variance.
    pub rho_cell: f64,
    /// Bounding box `(sigma2_min, sigma2_max, rho_min, rho_max)` of the
    /// grid nodes adjacent to the winner, i.e. the cells that touch it.
    pub neighbourhood: (f64, f64, f64, f64),
}

impl GridOptimum {
    /// Whether `(sigma2, rho)` lies in a cell touching the winning node.
    pub fn cell_contains(&self, sigma2: f64, rho: f64) -> bool {
        let (s0, s1, r0, r1) = self.neighbourhood;
        (s0..=s1).contains(&sigma2) && (r0..=r1).contains(&rho)
    }
}

struct GridAxes {
    s: f64,
    n: usize,
    c: usize,
    sigma2_cell: f64,
    rho_steps: usize,
}

impl GridAxes {
    fn sigma2(&self, i: usize) -> f64 {
        self.s + self.sigma2_cell * i as f64
    }

    /// Lower end and spacing of the correlation axis in column `i`.
    fn rho_axis(&self, i: usize) -> Result<(f64, f64)> {
        let sigma2 = self.sigma2(i);
        let range = feasible_rho_range(self.n, self.c, sigma2, self.s)?;
        let lo = range.lower / sigma2;
        let hi = range.upper.map_or(0.0, |u| (u / sigma2).min(0.0)).max(lo);
        Ok((lo, (hi - lo) / (self.rho_steps - 1) as f64))
    }
}

/// Brute-force minimiser of the worst-case MSE over a `sigma2 x rho` grid.
///
/// The variance axis is uniform on `[s, cap * s]`. At each variance the
/// correlation axis spans from the lower end of the feasible range to the
/// smaller of its upper end and zero; points that fail
/// [`privacy_margin`] or do not form a valid covariance are discarded.
pub fn grid_oracle_for(
    cfg: &SystemConfig,
    sigma2_eps_delta: f64,
    kind: EstimatorKind,
    grid: &GridSpec,
) -> Result<GridOptimum> {
    let s = sigma2_eps_delta;
    if grid.sigma_steps < 2 || grid.rho_steps < 2 || !(grid.sigma_cap_multiplier > 1.0) {
        return Err(Error::Oracle("grid needs >= 2 steps per axis and cap > 1".into()));
    }
    let (n, c) = (cfg.n, cfg.c);
    if n < 2 {
        let p = NoiseParams::finite(s, 0.0)?;
        let mse = worst_case_mse(cfg, &p, kind)?.mse;
        return Ok(GridOptimum { params: p, mse, sigma2_cell: 0.0, rho_cell: 0.0, neighbourhood: (s, s, 0.0, 0.0) });
    }
    let axes = GridAxes {
        s,
        n,
        c,
        sigma2_cell: (grid.sigma_cap_multiplier * s - s) / (grid.sigma_steps - 1) as f64,
        rho_steps: grid.rho_steps,
    };
    let tol = 1e-9 * s;
    let mut best: Option<(f64, usize, usize, NoiseParams, f64)> = None;
    for i in 0..grid.sigma_steps {
        let sigma2 = axes.sigma2(i);
        let (rho_lo, rho_cell) = axes.rho_axis(i)?;
        for j in 0..grid.rho_steps {
            let rho = rho_lo + rho_cell * j as f64;
            match privacy_margin(n, c, sigma2, rho * sigma2, s) {
                Ok(m) if m >= -tol => {}
                _ => continue,
            }
            if sigma2 * (1.0 + rho * (n as f64 - 1.0)) <= 0.0 {
                continue;
            }
            let params = NoiseParams::Finite { sigma2, rho };
            let mse = worst_case_mse(cfg, &params, kind)?.mse;
            if best.is_none_or(|b| mse < b.0) {
                best = Some((mse, i, j, params, rho_cell));
            }
        }
    }
    let (mse, bi, bj, params, rho_cell) = best.ok_or_else(|| Error::Oracle("no feasible grid point".into()))?;
    let mut nb = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for i in bi.saturating_sub(1)..=(bi + 1).min(grid.sigma_steps - 1) {
        let (lo, step) = axes.rho_axis(i)?;
        for j in bj.saturating_sub(1)..=(bj + 1).min(grid.rho_steps - 1) {
            let (sigma2, rho) = (axes.sigma2(i), lo + step * j as f64);
            nb = (nb.0.min(sigma2), nb.1.max(sigma2), nb.2.min(rho), nb.3.max(rho));
        }
    }
    Ok(GridOptimum { params, mse, sigma2_cell: axes.sigma2_cell, rho_cell, neighbourhood: nb })
}

/// [`grid_oracle_for`] after calibrating the budget.
pub fn grid_oracle(
    cfg: &SystemConfig,
    budget: &PrivacyBudget,
    kind: EstimatorKind,
    grid: &GridSpec,
) -> Result<GridOptimum> {
    grid_oracle_for(cfg, calibrated_variance(budget)?, kind, grid)
}

/// Analytic points of the responding-users curve: for each `u` in `1..=n`
/// the optimum designed for `t = u` and no collusion, next to the LDP and
/// central baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub u: usize,
    pub cdp: f64,
    pub cordp: f64,
    pub ldp: f64,
}

/// Central-model MSE: the exact mean over `u` users plus Gaussian noise of
/// variance `s / u^2` per coordinate. This acts like an aggregate variance
/// of `s / u`; unbiased it is `d s / u^2`.
pub fn cdp_mse(u_size: usize, d: usize, sigma2_eps_delta: f64, kind: EstimatorKind) -> Result<f64> {
    let v = NoiseParams::finite(sigma2_eps_delta / u_size.max(1) as f64, 0.0)?;
    analytic_mse(u_size, d, &v, kind)
}

pub fn responding_curve(n: usize, d: usize, sigma2_eps_delta: f64, kind: EstimatorKind) -> Result<Vec<CurvePoint>> {
    let ldp = NoiseParams::finite(sigma2_eps_delta, 0.0)?;
    (1..=n)
        .map(|u| {
            let cfg = SystemConfig::new(n, u, 0, d)?;
            let p = optimal_params_for(&cfg, sigma2_eps_delta)?;
            Ok(CurvePoint {
                u,
                cdp: cdp_mse(u, d, sigma2_eps_delta, kind)?,
                cordp: analytic_mse(u, d, &p, kind)?,
                ldp: analytic_mse(u, d, &ldp, kind)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const S: f64 = 3.975;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn config_validation() {
        assert!(SystemConfig::new(10, 8, 2, 5).is_ok());
        assert!(SystemConfig::new(10, 10, 12, 5).is_err());
        assert!(SystemConfig::new(10, 8, 8, 5).is_err());
        assert!(SystemConfig::new(10, 11, 0, 5).is_err());
        assert!(SystemConfig::new(10, 0, 0, 5).is_err());
        assert!(SystemConfig::new(10, 5, 0, 0).is_err());
    }

    #[test]
    fn effective_variance_examples() {
        let p = NoiseParams::finite(5.466, -0.0909).unwrap();
        assert!(close(effective_aggregate_variance(&p, 8).unwrap(), 5.466 * (1.0 - 7.0 * 0.0909), 1e-12));
        assert!((effective_aggregate_variance(&p, 8).unwrap() - 1.988).abs() < 1e-3);
        let p = NoiseParams::finite(7.5, 0.0).unwrap();
        assert_eq!(effective_aggregate_variance(&p, 4).unwrap(), 7.5);
        let p = NoiseParams::finite(4.0, -1.0 / 6.0).unwrap();
        assert_eq!(effective_aggregate_variance(&p, 7).unwrap(), 0.0);
        assert!(effective_aggregate_variance(&p, 0).is_err());
    }

    #[test]
    fn limit_mode_rejects_dropouts() {
        let p = NoiseParams::limit(10, 0, S).unwrap();
        assert!(close(effective_aggregate_variance(&p, 10).unwrap(), 0.3975, 1e-12));
        assert!(matches!(effective_aggregate_variance(&p, 9), Err(Error::Unsupported(_))));
        assert!(optimal_decoder(9, 5, &p, EstimatorKind::Unbiased).is_err());
    }

    #[test]
    fn limit_effective_examples() {
        assert!(close(limit_effective_variance(10, 0, S).unwrap(), 0.3975, 1e-12));
        assert!(close(limit_effective_variance(10, 2, S).unwrap(), S / 8.0, 1e-12));
        assert!(limit_effective_variance(10, 9, S).is_err());
        // Large-variance evaluation agrees with the closed form.
        for c in [0usize, 1, 2, 5] {
            let sigma2 = 1e8 * S;
            let r = feasible_rho_range(10, c, sigma2, S).unwrap().lower;
            let v = sigma2 + r * 9.0;
            let closed = limit_effective_variance(10, c, S).unwrap();
            assert!(close(v, closed, 1e-4), "c={c}: {v} vs {closed}");
        }
    }

    #[test]
    fn range_degenerates_at_calibrated_variance() {
        let r = feasible_rho_range(10, 0, S, S).unwrap();
        assert_eq!(r.lower, 0.0);
        assert_eq!(r.upper, Some(0.0));
        assert!(matches!(feasible_rho_range(10, 0, S * 0.9, S), Err(Error::Infeasible(_))));
    }

    #[test]
    fn range_reference_point() {
        let r = feasible_rho_range(10, 0, 5.466, S).unwrap();
        assert!((r.lower + 0.4969).abs() < 1e-3, "{r:?}");
        assert!((r.lower / 5.466 + 0.0909).abs() < 1e-3);
    }

    #[test]
    fn range_endpoints_are_valid_covariances() {
        for n in [2usize, 3, 5, 10, 30] {
            for c in 0..n {
                for mult in [1.0, 1.01, 2.0, 10.0, 1e4] {
                    let sigma2 = mult * S;
                    let r = feasible_rho_range(n, c, sigma2, S).unwrap();
                    assert!(sigma2 + r.lower * (n as f64 - 1.0) > 0.0, "n={n} c={c} mult={mult}");
                    let m = privacy_margin(n, c, sigma2, r.lower, S).unwrap();
                    assert!(m.abs() <= 1e-9 * sigma2.max(1.0), "n={n} c={c} margin {m}");
                }
            }
        }
    }

    #[test]
    fn privacy_margin_examples() {
        let m = privacy_margin(10, 0, 5.466, -0.4969, S).unwrap();
        assert!(m.abs() < 2e-3, "{m}");
        assert!(close(privacy_margin(10, 3, 6.0, 0.0, S).unwrap(), 6.0 - S, 1e-12));
        assert!(privacy_margin(3, 0, 1.0, -1.0, S).is_err());
    }

    #[test]
    fn table_three_parameters() {
        let cfg = SystemConfig::new(10, 8, 0, 5).unwrap();
        let p = optimal_params_for(&cfg, S).unwrap();
        assert!(close(p.sigma2().unwrap(), 5.466, 5e-4));
        assert!((p.rho() + 0.091).abs() < 5e-4);
        let cfg = SystemConfig::new(10, 8, 2, 5).unwrap();
        let p = optimal_params_for(&cfg, S).unwrap();
        assert!(close(p.sigma2().unwrap(), 6.318, 5e-4));
        assert!((p.rho() + 0.089).abs() < 5e-4);
        let cfg = SystemConfig::new(10, 10, 0, 5).unwrap();
        let p = optimal_params_for(&cfg, S).unwrap();
        assert!(p.is_limit());
        assert!((p.rho() + 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn table_three_mse() {
        let cases: [((usize, usize), f64, f64); 4] = [
            ((10, 0), 0.166, 0.199),
            ((10, 2), 0.199, 0.248),
            ((8, 0), 0.554, 1.242),
            ((8, 2), 0.598, 1.488),
        ];
        for ((t, c), biased, unbiased) in cases {
            let cfg = SystemConfig::new(10, t, c, 5).unwrap();
            let p = optimal_params_for(&cfg, S).unwrap();
            let b = worst_case_mse(&cfg, &p, EstimatorKind::BiasedOptimal).unwrap().mse;
            let u = worst_case_mse(&cfg, &p, EstimatorKind::Unbiased).unwrap().mse;
            assert!(close(b, biased, 5e-3), "t={t} c={c}: {b}");
            assert!(close(u, unbiased, 5e-3), "t={t} c={c}: {u}");
        }
        let ldp = NoiseParams::finite(S, 0.0).unwrap();
        assert!(close(analytic_mse(10, 5, &ldp, EstimatorKind::BiasedOptimal).unwrap(), 0.665, 5e-3));
        assert!(close(analytic_mse(10, 5, &ldp, EstimatorKind::Unbiased).unwrap(), 1.988, 5e-3));
    }

    #[test]
    fn decoder_examples() {
        let p = NoiseParams::finite(5.466, -0.0909).unwrap();
        let w = optimal_decoder(8, 5, &p, EstimatorKind::BiasedOptimal).unwrap();
        let v = 5.466 * (1.0 - 7.0 * 0.0909);
        assert!(close(w.alpha, 1.0 / (1.0 + 5.0 * v / 8.0), 1e-12));
        assert!((w.alpha - 0.4459).abs() < 1e-3);
        assert_eq!(optimal_decoder(8, 5, &p, EstimatorKind::Unbiased).unwrap().alpha, 1.0);
        let p = NoiseParams::finite(4.0, -1.0 / 7.0).unwrap();
        assert_eq!(optimal_decoder(8, 5, &p, EstimatorKind::BiasedOptimal).unwrap().alpha, 1.0);
        assert_eq!(analytic_mse(8, 5, &p, EstimatorKind::BiasedOptimal).unwrap(), 0.0);
    }

    #[test]
    fn collusion_of_all_but_one_is_ldp() {
        for n in 2..12 {
            let cfg = SystemConfig::new(n, n, n - 1, 3).unwrap();
            assert_eq!(optimal_params_for(&cfg, S).unwrap(), NoiseParams::Finite { sigma2: S, rho: 0.0 });
        }
    }

    #[test]
    fn worst_case_single_term_when_t_equals_n() {
        let cfg = SystemConfig::new(6, 6, 1, 4).unwrap();
        let p = optimal_params_for(&cfg, S).unwrap();
        let w = worst_case_mse(&cfg, &p, EstimatorKind::Unbiased).unwrap();
        assert_eq!(w.u_size, 6);
        assert_eq!(w.mse, analytic_mse(6, 4, &p, EstimatorKind::Unbiased).unwrap());
    }

    #[test]
    fn c_zero_branch_matches_interval_endpoint() {
        for n in 3..40 {
            for t in 1..n {
                let cfg = SystemConfig::new(n, t, 0, 1).unwrap();
                let p = optimal_params_for(&cfg, S).unwrap();
                let sigma2 = p.sigma2().unwrap();
                let lower = feasible_rho_range(n, 0, sigma2, S).unwrap().lower;
                assert!((p.rho() - lower / sigma2).abs() < 1e-9, "n={n} t={t}");
            }
        }
    }

    #[test]
    fn three_user_constraint() {
        // At n = 3, c = 0 the constraint reduces to
        // -2 r^2 + r (sigma2 - s) + sigma2 (sigma2 - s) >= 0.
        let cfg = SystemConfig::new(3, 2, 0, 2).unwrap();
        let g = grid_oracle_for(&cfg, S, EstimatorKind::Unbiased, &GridSpec::default()).unwrap();
        let sigma2 = g.params.sigma2().unwrap();
        let r = g.params.covariance().unwrap();
        let q = -2.0 * r * r + r * (sigma2 - S) + sigma2 * (sigma2 - S);
        assert!(q >= -1e-9 * sigma2 * sigma2, "{q}");
        let closed = optimal_params_for(&cfg, S).unwrap();
        assert!((closed.sigma2().unwrap() - sigma2).abs() <= g.sigma2_cell);
        assert!(g.cell_contains(closed.sigma2().unwrap(), closed.rho()));
    }

    #[test]
    fn grid_cap_sweep_without_dropouts() {
        let cfg = SystemConfig::new(10, 10, 0, 5).unwrap();
        let spec = |cap| GridSpec { sigma_steps: 200, rho_steps: 50, sigma_cap_multiplier: cap };
        let m: Vec<f64> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&cap| grid_oracle_for(&cfg, S, EstimatorKind::BiasedOptimal, &spec(cap)).unwrap().mse)
            .collect();
        assert!(m[0] > m[1] && m[1] > m[2], "{m:?}");
        let limit = analytic_mse(10, 5, &NoiseParams::limit(10, 0, S).unwrap(), EstimatorKind::BiasedOptimal).unwrap();
        assert!(m[2] > limit && m[2] - limit < 1e-3, "{} vs {limit}", m[2]);
        assert!((limit - 0.166).abs() < 1e-3);
    }

    #[test]
    fn responding_curve_endpoints() {
        for kind in [EstimatorKind::Unbiased, EstimatorKind::BiasedOptimal] {
            let pts = responding_curve(20, 4, S, kind).unwrap();
            assert_eq!(pts.len(), 20);
            assert!(close(pts[0].cordp, pts[0].ldp, 1e-9) && close(pts[0].cdp, pts[0].ldp, 1e-9));
            assert!(close(pts[19].cordp, pts[19].cdp, 1e-9));
        }
    }

    proptest! {
        #[test]
        fn rho_star_never_positive(n in 2usize..60, t_frac in 0.0f64..1.0, c_frac in 0.0f64..1.0, s in 0.1f64..50.0) {
            let t = 1 + ((n - 1) as f64 * t_frac) as usize;
            let c = ((t - 1) as f64 * c_frac) as usize;
            let cfg = SystemConfig::new(n, t, c, 3).unwrap();
            let p = optimal_params_for(&cfg, s).unwrap();
            prop_assert!(p.rho() <= 1e-15);
        }

        #[test]
        fn optimum_makes_constraint_tight(n in 3usize..60, t_frac in 0.0f64..1.0, c_frac in 0.0f64..1.0) {
            let t = 1 + ((n - 2) as f64 * t_frac) as usize;
            let c = ((t - 1) as f64 * c_frac) as usize;
            prop_assume!(t < n && c + 1 < n);
            let cfg = SystemConfig::new(n, t, c, 3).unwrap();
            let p = optimal_params_for(&cfg, S).unwrap();
            let sigma2 = p.sigma2().unwrap();
            prop_assert!(sigma2 >= S * (1.0 - 1e-12));
            let m = privacy_margin(n, c, sigma2, p.covariance().unwrap(), S).unwrap();
            prop_assert!(m.abs() <= 1e-6 * S, "margin {}", m);
        }

        #[test]
        fn optimum_beats_ldp(n in 2usize..60, t_frac in 0.0f64..1.0, c_frac in 0.0f64..1.0, d in 1usize..50) {
            let t = 1 + ((n - 1) as f64 * t_frac) as usize;
            let c = ((t - 1) as f64 * c_frac) as usize;
            let cfg = SystemConfig::new(n, t, c, d).unwrap();
            let p = optimal_params_for(&cfg, S).unwrap();
            let ldp = NoiseParams::finite(S, 0.0).unwrap();
            for kind in [EstimatorKind::BiasedOptimal, EstimatorKind::Unbiased] {
                let ours = worst_case_mse(&cfg, &p, kind).unwrap().mse;
                let base = worst_case_mse(&cfg, &ldp, kind).unwrap().mse;
                prop_assert!(ours <= base * (1.0 + 1e-12));
            }
        }

        #[test]
        fn worst_case_at_threshold(n in 2usize..40, t_frac in 0.0f64..1.0, mult in 1.0f64..30.0, pick in 0.0f64..1.0) {
            let t = 1 + ((n - 1) as f64 * t_frac) as usize;
            let cfg = SystemConfig::new(n, t, 0, 4).unwrap();
            let sigma2 = mult * S;
            let range = feasible_rho_range(n, 0, sigma2, S).unwrap();
            let r = range.lower + pick * (range.upper.unwrap().min(0.0) - range.lower);
            let p = NoiseParams::finite(sigma2, r / sigma2).unwrap();
            for kind in [EstimatorKind::BiasedOptimal, EstimatorKind::Unbiased] {
                let w = worst_case_mse(&cfg, &p, kind).unwrap();
                let at_t = analytic_mse(t, 4, &p, kind).unwrap();
                prop_assert!((w.mse - at_t).abs() <= 1e-12 * at_t.max(1e-12));
            }
        }

        #[test]
        fn two_users_reduce_to_orthogonal_component(mult in 1.0f64..100.0, rho in -1.0f64..1.0) {
            let sigma2 = mult * S;
            let range = feasible_rho_range(2, 0, sigma2, S).unwrap();
            let inside = range.contains(rho * sigma2);
            let direct = sigma2 * (1.0 - rho * rho) >= S;
            let boundary = (sigma2 * (1.0 - rho * rho) - S).abs() < 1e-9 * sigma2;
            prop_assert!(inside == direct || boundary);
        }

        #[test]
        fn decoder_weight_is_optimal(mult in 1.0f64..30.0, u in 1usize..30, d in 1usize..30, dev in -0.5f64..0.5) {
            let sigma2 = mult * S;
            let r = feasible_rho_range(30, 0, sigma2, S).unwrap().lower;
            let p = NoiseParams::finite(sigma2, r / sigma2).unwrap();
            let w = optimal_decoder(u, d, &p, EstimatorKind::BiasedOptimal).unwrap();
            let best = analytic_mse(u, d, &p, EstimatorKind::BiasedOptimal).unwrap();
            prop_assert!((mse_at_weight(w.alpha, u, d, &p).unwrap() - best).abs() <= 1e-12);
            prop_assert!(best <= mse_at_weight(w.alpha + dev, u, d, &p).unwrap() + 1e-15);
        }
    }
}
