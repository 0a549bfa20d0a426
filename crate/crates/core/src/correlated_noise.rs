//! Offline generation of correlated noise from pairwise shared seeds.
//!
//! Every pair `i < j` shares a seed from which both derive the same vector
//! `S_ij ~ N(0, -rho sigma2 I_d)`. User `i` adds the pads of lower-indexed
//! peers, subtracts those of higher-indexed peers and adds private noise
//! `N_i ~ N(0, sigma2 (1 + rho (n-1)) I_d)`. The pads cancel in the full sum.
//!
//! Pair seed `(i, j)` is `derive("cordp/pair", master, [min, max])` and the
//! own seed of `i` is `derive("cordp/own", master, [i])`; see [`crate::rng`].

use crate::error::{Error, Result};
use crate::optimizer::NoiseParams;
use crate::rng::{derive, Seed};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Seed shared by users `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSeed {
    pub i: usize,
    pub j: usize,
    pub seed: Seed,
}

/// All seeds handed out by the dealer.
#[derive(Debug, Clone)]
pub struct SeedBook {
    n: usize,
    pairs: Vec<Seed>,
    own: Vec<Seed>,
}

fn pair_index(n: usize, i: usize, j: usize) -> usize {
    // Row-major upper triangle without the diagonal.
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// Simulated key exchange: a trusted dealer keyed by `master`.
pub fn deal_seeds(n: usize, master: &Seed) -> Result<SeedBook> {
    if n < 2 {
        return Err(Error::Config(format!("need at least two users, got {n}")));
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(derive(b"cordp/pair", master, &[i as u64, j as u64]));
        }
    }
    let own = (0..n).map(|i| derive(b"cordp/own", master, &[i as u64])).collect();
    Ok(SeedBook { n, pairs, own })
}

impl SeedBook {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Seed shared by `a` and `b`, in either order.
    pub fn pair(&self, a: usize, b: usize) -> Result<PairSeed> {
        if a == b || a >= self.n || b >= self.n {
            return Err(Error::Domain(format!("no pair seed for ({a}, {b}) among {} users", self.n)));
        }
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        Ok(PairSeed { i, j, seed: self.pairs[pair_index(self.n, i, j)] })
    }

    pub fn own(&self, user: usize) -> Result<Seed> {
        self.own
            .get(user)
            .copied()
            .ok_or_else(|| Error::Domain(format!("user {user} out of range")))
    }

    /// Everything `user` needs to produce its noise.
    pub fn plan(&self, user: usize, params: NoiseParams, d: usize) -> Result<UserNoisePlan> {
        let own_seed = self.own(user)?;
        let pair_seeds = (0..self.n)
            .filter(|&j| j != user)
            .map(|j| self.pair(user, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(UserNoisePlan { user, n: self.n, pair_seeds, own_seed, params, d })
    }
}

/// Inputs to one user's noise generation.
#[derive(Debug, Clone)]
pub struct UserNoisePlan {
    pub user: usize,
    pub n: usize,
    /// One seed per peer, in increasing peer order.
    pub pair_seeds: Vec<PairSeed>,
    pub own_seed: Seed,
    pub params: NoiseParams,
    pub d: usize,
}

/// Variances of the shared pads and of the private term.
fn component_variances(params: &NoiseParams, n: usize) -> Result<(f64, f64)> {
    let (sigma2, rho) = match *params {
        NoiseParams::Finite { sigma2, rho } => (sigma2, rho),
        NoiseParams::Limit { .. } => {
            return Err(Error::Unsupported(
                "limit-mode parameters cannot be sampled; substitute a finite variance".into(),
            ))
        }
    };
    if rho > 0.0 {
        return Err(Error::Domain(format!("positive correlation {rho} is not supported")));
    }
    let own = sigma2 * (1.0 + rho * (n as f64 - 1.0));
    if own < -1e-12 * sigma2 {
        return Err(Error::Domain(format!(
            "private noise variance {own} is negative for n={n}"
        )));
    }
    Ok((-rho * sigma2, own.max(0.0)))
}

/// The pad vector both endpoints of `seed` derive.
pub fn shared_pair_sample(seed: &PairSeed, d: usize, variance: f64) -> Result<Vec<f64>> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::Domain(format!("pad variance must be >= 0, got {variance}")));
    }
    if variance == 0.0 {
        return Ok(vec![0.0; d]);
    }
    Ok(seed.seed.stream().gaussian_vec(d, libm::sqrt(variance)))
}

fn private_sample(seed: &Seed, d: usize, variance: f64) -> Vec<f64> {
    if variance == 0.0 {
        return vec![0.0; d];
    }
    seed.stream().gaussian_vec(d, libm::sqrt(variance))
}

/// `Z_i = sum_{j<i} S_ij - sum_{j>i} S_ij + N_i`.
pub fn generate_user_noise(plan: &UserNoisePlan) -> Result<Vec<f64>> {
    let (pad_var, own_var) = component_variances(&plan.params, plan.n)?;
    let mut z = private_sample(&plan.own_seed, plan.d, own_var);
    for ps in &plan.pair_seeds {
        let s = shared_pair_sample(ps, plan.d, pad_var)?;
        let sign = if ps.i == plan.user { -1.0 } else { 1.0 };
        for (zk, sk) in z.iter_mut().zip(&s) {
            *zk += sign * sk;
        }
    }
    Ok(z)
}

/// Noise of every user, sampling each pad once. Bit-identical to calling
/// [`generate_user_noise`] per user.
pub fn generate_all_noise(book: &SeedBook, params: &NoiseParams, d: usize) -> Result<Vec<Vec<f64>>> {
    let n = book.n;
    let (pad_var, own_var) = component_variances(params, n)?;
    let mut zs: Vec<Vec<f64>> = book.own.iter().map(|s| private_sample(s, d, own_var)).collect();
    // Same per-user accumulation order as the single-user path.
    let mut pads: Vec<Vec<f64>> = Vec::with_capacity(book.pairs.len());
    if pad_var > 0.0 {
        let std = libm::sqrt(pad_var);
        for s in &book.pairs {
            pads.push(s.stream().gaussian_vec(d, std));
        }
    } else {
        pads.resize(book.pairs.len(), vec![0.0; d]);
    }
    for (user, z) in zs.iter_mut().enumerate() {
        for peer in (0..n).filter(|&p| p != user) {
            let (i, j) = if user < peer { (user, peer) } else { (peer, user) };
            let sign = if i == user { -1.0 } else { 1.0 };
            for (zk, sk) in z.iter_mut().zip(&pads[pair_index(n, i, j)]) {
                *zk += sign * sk;
            }
        }
    }
    Ok(zs)
}

/// What a user uploads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector {
    pub user: usize,
    pub payload: Vec<f64>,
}

/// `x + z` after checking that `x` lies in the unit ball.
pub fn encode(user: usize, x: &[f64], z: &[f64]) -> Result<EncodedVector> {
    if x.len() != z.len() {
        return Err(Error::Domain(format!("dimension mismatch: {} vs {}", x.len(), z.len())));
    }
    let norm = libm::sqrt(x.iter().map(|v| v * v).sum::<f64>());
    if !(norm <= 1.0 + 1e-12) {
        return Err(Error::InputDomain { norm });
    }
    Ok(EncodedVector { user, payload: x.iter().zip(z).map(|(a, b)| a + b).collect() })
}

/// Moment estimates and their standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceEstimate {
    /// Per-user, per-coordinate variance.
    pub variance: f64,
    /// Covariance of two users on the same coordinate.
    pub covariance: f64,
    /// Covariance of coordinates `k` and `k+1 mod d`, over all user pairs
    /// including a user with itself. `None` when `d = 1`.
    pub cross_coordinate: Option<f64>,
    /// Variance of the per-coordinate sum over users.
    pub sum_variance: f64,
    pub se_variance: f64,
    pub se_covariance: f64,
    pub se_cross_coordinate: Option<f64>,
    pub se_sum_variance: f64,
    pub draws: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Running {
    sum: f64,
    sum_sq: f64,
}

impl Running {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.sum_sq += v * v;
    }
    fn se(&self, m: usize) -> f64 {
        let mf = m as f64;
        let mean = self.sum / mf;
        let var = ((self.sum_sq - mf * mean * mean) / (mf - 1.0)).max(0.0);
        libm::sqrt(var / mf)
    }
}

/// Streaming estimator over joint draws `(Z_0, ..., Z_{n-1})`.
///
/// Estimates are the unbiased centred sample moments pooled over users and
/// coordinates. Standard errors treat each joint draw as one observation
/// of the pooled uncentred statistic.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    n: usize,
    d: usize,
    m: usize,
    mean_sum: Vec<f64>,
    var_stat: Running,
    cov_stat: Running,
    cross_stat: Running,
    sum_stat: Running,
}

impl CovarianceAccumulator {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n < 2 || d == 0 {
            return Err(Error::Domain(format!("need n >= 2 and d >= 1 (n={n}, d={d})")));
        }
        Ok(Self {
            n,
            d,
            m: 0,
            mean_sum: vec![0.0; n * d],
            var_stat: Running::default(),
            cov_stat: Running::default(),
            cross_stat: Running::default(),
            sum_stat: Running::default(),
        })
    }

    pub fn push(&mut self, draw: &[Vec<f64>]) -> Result<()> {
        let (n, d) = (self.n, self.d);
        if draw.len() != n || draw.iter().any(|z| z.len() != d) {
            return Err(Error::Domain("draw shape does not match the accumulator".into()));
        }
        let mut sq = 0.0;
        let mut col = vec![0.0; d];
        for (i, z) in draw.iter().enumerate() {
            for (k, &v) in z.iter().enumerate() {
                self.mean_sum[i * d + k] += v;
                sq += v * v;
                col[k] += v;
            }
        }
        let col_sq: f64 = col.iter().map(|c| c * c).sum();
        let pairs = (n * (n - 1) / 2) as f64;
        self.var_stat.push(sq / (n * d) as f64);
        self.cov_stat.push((col_sq - sq) / 2.0 / (pairs * d as f64));
        self.sum_stat.push(col_sq / d as f64);
        if d > 1 {
            let cross: f64 = (0..d).map(|k| col[k] * col[(k + 1) % d]).sum();
            // d = 2 visits each unordered coordinate pair twice; same mean.
            self.cross_stat.push(cross / ((n * n * d) as f64));
        }
        self.m += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<CovarianceEstimate> {
        let m = self.m;
        if m < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: m });
        }
        let (n, d) = (self.n, self.d);
        let mf = m as f64;
        let means: Vec<f64> = self.mean_sum.iter().map(|s| s / mf).collect();
        let scale = mf / (mf - 1.0);
        let mean_sq: f64 = means.iter().map(|v| v * v).sum();
        let mut col = vec![0.0; d];
        for i in 0..n {
            for k in 0..d {
                col[k] += means[i * d + k];
            }
        }
        let col_sq: f64 = col.iter().map(|c| c * c).sum();
        let pairs = (n * (n - 1) / 2) as f64;
        let raw = |r: &Running| r.sum / mf;
        let variance = scale * (raw(&self.var_stat) - mean_sq / (n * d) as f64);
        let covariance =
            scale * (raw(&self.cov_stat) - (col_sq - mean_sq) / 2.0 / (pairs * d as f64));
        let sum_variance = scale * (raw(&self.sum_stat) - col_sq / d as f64);
        let (cross_coordinate, se_cross_coordinate) = if d > 1 {
            let c: f64 = (0..d).map(|k| col[k] * col[(k + 1) % d]).sum();
            (
                Some(scale * (raw(&self.cross_stat) - c / (n * n * d) as f64)),
                Some(self.cross_stat.se(m)),
            )
        } else {
            (None, None)
        };
        Ok(CovarianceEstimate {
            variance,
            covariance,
            cross_coordinate,
            sum_variance,
            se_variance: self.var_stat.se(m),
            se_covariance: self.cov_stat.se(m),
            se_cross_coordinate,
            se_sum_variance: self.sum_stat.se(m),
            draws: m,
        })
    }
}

/// Batch form of [`CovarianceAccumulator`].
pub fn empirical_covariance(samples: &[Vec<Vec<f64>>]) -> Result<CovarianceEstimate> {
    let first = samples
        .first()
        .ok_or(Error::InsufficientSamples { needed: 2, got: 0 })?;
    let d = first.first().map_or(0, |z| z.len());
    let mut acc = CovarianceAccumulator::new(first.len(), d)?;
    for s in samples {
        acc.push(s)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(sigma2: f64, rho: f64) -> NoiseParams {
        NoiseParams::finite(sigma2, rho).unwrap()
    }

    #[test]
    fn pair_index_is_dense() {
        let n = 7;
        let mut seen = vec![false; n * (n - 1) / 2];
        for i in 0..n {
            for j in i + 1..n {
                let k = pair_index(n, i, j);
                assert!(!seen[k]);
                seen[k] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn seeds_are_symmetric_and_deterministic() {
        let m = Seed::from_u64(11);
        let a = deal_seeds(3, &m).unwrap();
        let b = deal_seeds(3, &m).unwrap();
        assert_eq!(a.pair(1, 2).unwrap(), a.pair(2, 1).unwrap());
        assert_eq!(a.pair(0, 2).unwrap(), b.pair(0, 2).unwrap());
        let other = deal_seeds(3, &Seed::from_u64(12)).unwrap();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert_ne!(a.pair(i, j).unwrap().seed, other.pair(i, j).unwrap().seed);
        }
        assert!(a.pair(1, 1).is_err());
        assert!(deal_seeds(1, &m).is_err());
    }

    #[test]
    fn plan_covers_all_peers() {
        let book = deal_seeds(5, &Seed::from_u64(1)).unwrap();
        let plan = book.plan(2, params(1.0, -0.1), 3).unwrap();
        let peers: Vec<usize> =
            plan.pair_seeds.iter().map(|p| if p.i == 2 { p.j } else { p.i }).collect();
        assert_eq!(peers, [0, 1, 3, 4]);
    }

    #[test]
    fn zero_pad_variance() {
        let book = deal_seeds(2, &Seed::from_u64(1)).unwrap();
        assert_eq!(shared_pair_sample(&book.pair(0, 1).unwrap(), 4, 0.0).unwrap(), [0.0; 4]);
        assert!(shared_pair_sample(&book.pair(0, 1).unwrap(), 4, -1.0).is_err());
    }

    #[test]
    fn two_user_signs() {
        let book = deal_seeds(2, &Seed::from_u64(5)).unwrap();
        let p = params(2.0, -0.5);
        let s = shared_pair_sample(&book.pair(0, 1).unwrap(), 3, 1.0).unwrap();
        let own0 = private_sample(&book.own(0).unwrap(), 3, 1.0);
        let own1 = private_sample(&book.own(1).unwrap(), 3, 1.0);
        let z0 = generate_user_noise(&book.plan(0, p, 3).unwrap()).unwrap();
        let z1 = generate_user_noise(&book.plan(1, p, 3).unwrap()).unwrap();
        for k in 0..3 {
            assert_eq!(z0[k], own0[k] - s[k]);
            assert_eq!(z1[k], own1[k] + s[k]);
        }
    }

    #[test]
    fn independent_noise_has_no_pads() {
        let book = deal_seeds(4, &Seed::from_u64(5)).unwrap();
        let z = generate_user_noise(&book.plan(3, params(2.0, 0.0), 5).unwrap()).unwrap();
        assert_eq!(z, private_sample(&book.own(3).unwrap(), 5, 2.0));
    }

    #[test]
    fn batch_matches_per_user() {
        for n in [2usize, 3, 6] {
            let book = deal_seeds(n, &Seed::from_u64(n as u64)).unwrap();
            let p = params(5.0, -0.9 / (n as f64 - 1.0));
            let all = generate_all_noise(&book, &p, 4).unwrap();
            for (u, z) in all.iter().enumerate() {
                assert_eq!(*z, generate_user_noise(&book.plan(u, p, 4).unwrap()).unwrap());
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        let book = deal_seeds(3, &Seed::from_u64(5)).unwrap();
        assert!(generate_all_noise(&book, &params(1.0, 0.2), 2).is_err());
        assert!(generate_all_noise(&book, &params(1.0, -0.9), 2).is_err());
        let lim = NoiseParams::limit(3, 0, 1.0).unwrap();
        assert!(matches!(generate_all_noise(&book, &lim, 2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn encode_checks_ball() {
        assert_eq!(encode(0, &[0.0; 3], &[0.0; 3]).unwrap().payload, [0.0; 3]);
        assert_eq!(encode(0, &[1.0, 0.0], &[0.0, 0.0]).unwrap().payload, [1.0, 0.0]);
        assert_eq!(encode(0, &[0.6, 0.8], &[1.0, -1.0]).unwrap().payload, [1.6, -0.19999999999999996]);
        assert!(matches!(encode(0, &[0.8, 0.8], &[0.0, 0.0]), Err(Error::InputDomain { .. })));
        assert!(encode(0, &[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn constant_samples_have_zero_moments() {
        let draw = vec![vec![1.5, -2.0], vec![0.5, 3.0], vec![7.0, 0.0]];
        let est = empirical_covariance(&vec![draw; 10]).unwrap();
        assert!(est.variance.abs() < 1e-12);
        assert!(est.covariance.abs() < 1e-12);
        assert!(est.cross_coordinate.unwrap().abs() < 1e-12);
        assert!(est.sum_variance.abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let draw = vec![vec![0.0], vec![0.0]];
        assert!(matches!(
            empirical_covariance(&[draw]),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
        assert!(empirical_covariance(&[]).is_err());
    }
}
