//! General covariance matrices: worst-subset unbiased MSE, the
//! inverse-diagonal privacy test and permutation averaging.

use crate::calibration::{calibrated_variance, PrivacyBudget};
use crate::error::{Error, Result};
use crate::rng::Seed;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Largest `n` accepted by [`unbiased_mse_of_sigma`].
pub const MAX_ENUMERATION: usize = 20;
/// Largest `n` accepted by [`converse_property_trial`].
pub const MAX_CONVERSE: usize = 8;
/// Matrices with a larger condition number are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
const SYMMETRY_TOL: f64 = 1e-12;

/// Symmetric positive definite `n x n` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CovarianceMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 || entries.len() != n * n {
            return Err(Error::Domain(format!("expected {} entries for n={n}", n * n)));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite entry".into()));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (entries[i * n + j], entries[j * n + i]);
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::Domain(format!("not symmetric at ({i}, {j})")));
                }
            }
        }
        let m = Self { n, entries };
        let (lo, _) = m.eigen_range();
        if !(lo > 0.0) {
            return Err(Error::Domain(format!("not positive definite (smallest eigenvalue {lo})")));
        }
        Ok(m)
    }

    /// Common variance `sigma2` on the diagonal and covariance `r` elsewhere.
    pub fn exchangeable(n: usize, sigma2: f64, r: f64) -> Result<Self> {
        let mut e = vec![r; n * n];
        for i in 0..n {
            e[i * n + i] = sigma2;
        }
        Self::new(n, e)
    }

    pub fn scaled_identity(n: usize, v: f64) -> Result<Self> {
        Self::exchangeable(n, v, 0.0)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Smallest and largest eigenvalue by cyclic Jacobi rotations.
    pub fn eigen_range(&self) -> (f64, f64) {
        let ev = symmetric_eigenvalues(self.n, &self.entries);
        let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn condition_number(&self) -> f64 {
        let (lo, hi) = self.eigen_range();
        hi / lo
    }

    /// Inverse through a Cholesky factorisation.
    pub fn inverse(&self) -> Result<Vec<f64>> {
        let cond = self.condition_number();
        if !(cond <= MAX_CONDITION) {
            return Err(Error::Conditioning(format!("condition number {cond:e} exceeds {MAX_CONDITION:e}")));
        }
        let n = self.n;
        let l = cholesky(n, &self.entries)?;
        let mut inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for c in 0..n {
            // Solve L y = e_c, then L^T x = y.
            for i in 0..n {
                let mut s = if i == c { 1.0 } else { 0.0 };
                for k in 0..i {
                    s -= l[i * n + k] * col[k];
                }
                col[i] = s / l[i * n + i];
            }
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in i + 1..n {
                    s -= l[k * n + i] * col[k];
                }
                col[i] = s / l[i * n + i];
            }
            for i in 0..n {
                inv[i * n + c] = col[i];
            }
        }
        Ok(inv)
    }

    fn scale(&self, s: f64) -> Self {
        Self { n: self.n, entries: self.entries.iter().map(|v| v * s).collect() }
    }

    /// True when all diagonal entries agree and all off-diagonal entries agree.
    pub fn is_exchangeable(&self, tol: f64) -> bool {
        let n = self.n;
        let d0 = self.get(0, 0);
        let o0 = if n > 1 { self.get(0, 1) } else { 0.0 };
        (0..n).all(|i| {
            (0..n).all(|j| {
                let want = if i == j { d0 } else { o0 };
                (self.get(i, j) - want).abs() <= tol * want.abs().max(1.0)
            })
        })
    }
}

fn cholesky(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Conditioning(format!("Cholesky pivot {s} at {i}")));
                }
                l[i * n + i] = libm::sqrt(s);
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn symmetric_eigenvalues(n: usize, entries: &[f64]) -> Vec<f64> {
    let mut a = entries.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Worst-subset unbiased MSE: the maximum over `t <= |U| <= n` of
/// `d / |U|^2 * 1_U^T Sigma 1_U`, by enumeration of all subsets.
pub fn unbiased_mse_of_sigma(sigma: &CovarianceMatrix, t: usize, d: usize) -> Result<f64> {
    Ok(worst_subset(sigma, t, d)?.0)
}

/// As [`unbiased_mse_of_sigma`], also returning the maximising subset as a bitmask.
pub fn worst_subset(sigma: &CovarianceMatrix, t: usize, d: usize) -> Result<(f64, u32)> {
    let n = sigma.n;
    if n > MAX_ENUMERATION {
        return Err(Error::Size { n, max: MAX_ENUMERATION });
    }
    if t == 0 || t > n {
        return Err(Error::Domain(format!("need 1 <= t <= n (t={t}, n={n})")));
    }
    let total = 1usize << n;
    // quad[mask] = 1_U^T Sigma 1_U, built by adding the lowest member last.
    let mut quad = vec![0.0f64; total];
    let mut best = (f64::NEG_INFINITY, 0u32);
    for mask in 1..total {
        let v = mask.trailing_zeros() as usize;
        let rest = mask & (mask - 1);
        let mut cross = 0.0;
        let mut bits = rest;
        while bits != 0 {
            let u = bits.trailing_zeros() as usize;
            cross += sigma.get(v, u);
            bits &= bits - 1;
        }
        quad[mask] = quad[rest] + sigma.get(v, v) + 2.0 * cross;
        let size = mask.count_ones() as usize;
        if size >= t {
            let m = d as f64 * quad[mask] / (size * size) as f64;
            if m > best.0 {
                best = (m, mask as u32);
            }
        }
    }
    Ok(best)
}

/// Result of [`privacy_check_inverse_diag`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyCheck {
    pub passes: bool,
    /// `1/s - (Sigma^-1)_ii` per user.
    pub margins: Vec<f64>,
}

/// Relative slack granted to round-off in the inverse diagonal.
pub const PRIVACY_TOL: f64 = 1e-9;

/// Passes when every diagonal entry of `Sigma^-1` is at most `1/s`.
pub fn privacy_check_inverse_diag(sigma: &CovarianceMatrix, sigma2_eps_delta: f64) -> Result<PrivacyCheck> {
    if !(sigma2_eps_delta > 0.0) {
        return Err(Error::Domain(format!("calibrated variance must be positive, got {sigma2_eps_delta}")));
    }
    let inv = sigma.inverse()?;
    let bound = 1.0 / sigma2_eps_delta;
    let margins: Vec<f64> = (0..sigma.n).map(|i| bound - inv[i * sigma.n + i]).collect();
    let passes = margins.iter().all(|&m| m >= -PRIVACY_TOL * bound);
    Ok(PrivacyCheck { passes, margins })
}

/// Average of `P Sigma P^T` over all permutations `P`, in closed form:
/// the mean diagonal entry on the diagonal, the mean off-diagonal entry elsewhere.
pub fn permutation_average(sigma: &CovarianceMatrix) -> CovarianceMatrix {
    let n = sigma.n;
    let diag = (0..n).map(|i| sigma.get(i, i)).sum::<f64>() / n as f64;
    let off = if n > 1 {
        let total: f64 = sigma.entries.iter().sum();
        let tr: f64 = (0..n).map(|i| sigma.get(i, i)).sum();
        (total - tr) / (n * (n - 1)) as f64
    } else {
        0.0
    };
    let mut e = vec![off; n * n];
    for i in 0..n {
        e[i * n + i] = diag;
    }
    // The average of positive definite matrices is positive definite.
    CovarianceMatrix { n, entries: e }
}

/// Outcome of one [`converse_property_trial`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConverseReport {
    pub sigma: CovarianceMatrix,
    pub averaged: CovarianceMatrix,
    pub mse_sigma: f64,
    pub mse_averaged: f64,
    pub sigma_passes: bool,
    pub averaged_passes: bool,
    /// Samples rejected for conditioning before this one was accepted.
    pub rejected: usize,
}

impl ConverseReport {
    /// Averaging did not increase the MSE (up to round-off) and kept privacy.
    pub fn holds(&self) -> bool {
        self.mse_averaged <= self.mse_sigma * (1.0 + 1e-12) && self.averaged_passes
    }
}

/// Attempts allowed before the sampler gives up.
pub const SAMPLING_BUDGET: usize = 64;

/// Random feasible covariance `s * max_i (A^-1)_ii * A` with `A = G G^T + eps I`.
pub fn random_feasible_sigma(n: usize, sigma2_eps_delta: f64, seed: &Seed) -> Result<(CovarianceMatrix, usize)> {
    let mut stream = seed.child(b"cordp/spd", &[]).stream();
    for attempt in 0..SAMPLING_BUDGET {
        let g: Vec<f64> = (0..n * n).map(|_| stream.gaussian()).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = (0..n).map(|k| g[i * n + k] * g[j * n + k]).sum();
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
            a[i * n + i] += 1e-3;
        }
        let m = match CovarianceMatrix::new(n, a) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let inv = match m.inverse() {
            Ok(inv) => inv,
            Err(_) => continue,
        };
        let worst = (0..n).map(|i| inv[i * n + i]).fold(0.0, f64::max);
        return Ok((m.scale(sigma2_eps_delta * worst), attempt));
    }
    Err(Error::Sampling(format!("no well-conditioned sample in {SAMPLING_BUDGET} attempts")))
}

/// Samples a feasible covariance and compares it with its permutation average.
pub fn converse_property_trial(
    n: usize,
    t: usize,
    d: usize,
    budget: &PrivacyBudget,
    seed: &Seed,
) -> Result<ConverseReport> {
    converse_trial_for(n, t, d, calibrated_variance(budget)?, seed)
}

/// [`converse_property_trial`] with a precomputed calibrated variance.
pub fn converse_trial_for(n: usize, t: usize, d: usize, sigma2_eps_delta: f64, seed: &Seed) -> Result<ConverseReport> {
    if n > MAX_CONVERSE {
        return Err(Error::Size { n, max: MAX_CONVERSE });
    }
    if n < 2 {
        return Err(Error::Domain(format!("need n >= 2, got {n}")));
    }
    let (sigma, rejected) = random_feasible_sigma(n, sigma2_eps_delta, seed)?;
    converse_check(sigma, t, d, sigma2_eps_delta, rejected)
}

/// Compares a given covariance with its permutation average.
pub fn converse_check(
    sigma: CovarianceMatrix,
    t: usize,
    d: usize,
    sigma2_eps_delta: f64,
    rejected: usize,
) -> Result<ConverseReport> {
    let averaged = permutation_average(&sigma);
    Ok(ConverseReport {
        mse_sigma: unbiased_mse_of_sigma(&sigma, t, d)?,
        mse_averaged: unbiased_mse_of_sigma(&averaged, t, d)?,
        sigma_passes: privacy_check_inverse_diag(&sigma, sigma2_eps_delta)?.passes,
        averaged_passes: privacy_check_inverse_diag(&averaged, sigma2_eps_delta)?.passes,
        sigma,
        averaged,
        rejected,
    })
}
