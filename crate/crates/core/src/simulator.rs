//! End-to-end Monte-Carlo trials of private mean estimation.

use crate::calibration::{calibrated_variance, PrivacyBudget};
use crate::correlated_noise::{deal_seeds, encode, generate_all_noise};
use crate::covariance_lab::CovarianceMatrix;
use crate::error::{Error, Result};
use crate::optimizer::{
    analytic_mse, cdp_mse, effective_aggregate_variance, feasible_rho_range, optimal_params_for, EstimatorKind,
    NoiseParams, SystemConfig,
};
use crate::rng::{Seed, Stream};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Default variance multiplier standing in for an unbounded variance.
pub const DEFAULT_SIGMA_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    /// Optimised correlated noise.
    CorDp,
    /// Independent noise at the calibrated variance.
    Ldp,
    /// A trusted server perturbs the exact mean.
    Cdp,
    /// Exact sum from secure aggregation, then central noise.
    SecAggIdeal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputMode {
    /// Every user holds the first standard basis vector.
    WorstCaseEqualSphere,
    /// Independent uniform draws from the unit ball.
    RandomBall,
    /// One vector per user.
    Fixed(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RespondingMode {
    /// Exactly `t` users respond.
    ExactT,
    /// A uniform size in `[t, n]`.
    RandomGeqT,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSpec {
    pub cfg: SystemConfig,
    pub budget: PrivacyBudget,
    pub mechanism: Mechanism,
    pub estimator: EstimatorKind,
    pub input_mode: InputMode,
    pub responding_mode: RespondingMode,
    /// At most `c` users whose transcripts the server learns.
    pub colluding_set: Vec<usize>,
    pub master_seed: Seed,
    /// Finite stand-in for an unbounded variance, as a multiple of the
    /// calibrated variance.
    pub sigma_cap_multiplier: f64,
    /// Lets colluders drop like anyone else.
    pub allow_colluder_dropout: bool,
    /// Replaces the optimised parameters of [`Mechanism::CorDp`].
    pub noise_override: Option<NoiseParams>,
}

impl TrialSpec {
    /// Worst-case inputs, exactly `t` responders, no colluders.
    pub fn new(cfg: SystemConfig, budget: PrivacyBudget, mechanism: Mechanism, estimator: EstimatorKind) -> Self {
        Self {
            cfg,
            budget,
            mechanism,
            estimator,
            input_mode: InputMode::WorstCaseEqualSphere,
            responding_mode: RespondingMode::ExactT,
            colluding_set: Vec::new(),
            master_seed: Seed::from_u64(0),
            sigma_cap_multiplier: DEFAULT_SIGMA_CAP,
            allow_colluder_dropout: false,
            noise_override: None,
        }
    }

    /// Validates the spec and resolves the noise parameters.
    pub fn prepare(&self) -> Result<PreparedTrial> {
        let s = calibrated_variance(&self.budget)?;
        self.prepare_with(s)
    }

    /// As [`TrialSpec::prepare`] with a known calibrated variance.
    pub fn prepare_with(&self, sigma2_eps_delta: f64) -> Result<PreparedTrial> {
        let (n, c, d) = (self.cfg.n(), self.cfg.c(), self.cfg.d());
        if self.colluding_set.len() > c {
            return Err(Error::Config(format!(
                "{} colluders exceed the threshold c={c}",
                self.colluding_set.len()
            )));
        }
        let mut seen = vec![false; n];
        for &j in &self.colluding_set {
            if j >= n || core::mem::replace(&mut seen[j], true) {
                return Err(Error::Config(format!("bad or repeated colluder {j}")));
            }
        }
        if let InputMode::Fixed(xs) = &self.input_mode {
            if xs.len() != n || xs.iter().any(|x| x.len() != d) {
                return Err(Error::Config(format!("fixed inputs must be {n} vectors of length {d}")));
            }
        }
        let s = sigma2_eps_delta;
        let params = match self.mechanism {
            Mechanism::CorDp => match self.noise_override {
                Some(p) => p,
                None => optimal_params_for(&self.cfg, s)?,
            },
            Mechanism::Ldp => NoiseParams::finite(s, 0.0)?,
            Mechanism::Cdp | Mechanism::SecAggIdeal => NoiseParams::finite(0.0, 0.0)?,
        };
        let sampled = match params {
            NoiseParams::Finite { .. } => params,
            NoiseParams::Limit { .. } => {
                let m = self.sigma_cap_multiplier;
                if !(m.is_finite() && m > 1.0) {
                    return Err(Error::Config(format!(
                        "limit-mode simulation needs a finite sigma_cap_multiplier > 1, got {m}"
                    )));
                }
                let sigma2 = m * s;
                let r = feasible_rho_range(n, c, sigma2, s)?.lower;
                NoiseParams::finite(sigma2, r / sigma2)?
            }
        };
        if matches!(self.mechanism, Mechanism::CorDp | Mechanism::Ldp) {
            sampled.validate_for(n)?;
        }
        Ok(PreparedTrial { spec: self.clone(), sigma2_eps_delta: s, params, sampled })
    }
}

/// A validated spec with resolved parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTrial {
    pub spec: TrialSpec,
    pub sigma2_eps_delta: f64,
    /// Parameters of the design; may be limit mode.
    pub params: NoiseParams,
    /// Finite parameters actually sampled.
    pub sampled: NoiseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial_index: u64,
    pub squared_error: f64,
    pub u_size: usize,
    pub estimate: Vec<f64>,
    pub true_mean: Vec<f64>,
}

/// Central noise variance on the mean of `u` responses.
fn central_variance(s: f64, u: usize) -> f64 {
    s / (u * u) as f64
}

/// Analytic MSE of `mechanism` with `u` responders; central mechanisms act
/// like an aggregate variance of `s / u`.
pub fn mechanism_mse(
    mechanism: Mechanism,
    params: &NoiseParams,
    sigma2_eps_delta: f64,
    u: usize,
    d: usize,
    kind: EstimatorKind,
) -> Result<f64> {
    match mechanism {
        Mechanism::CorDp => analytic_mse(u, d, params, kind),
        Mechanism::Ldp => analytic_mse(u, d, &NoiseParams::finite(sigma2_eps_delta, 0.0)?, kind),
        Mechanism::Cdp | Mechanism::SecAggIdeal => cdp_mse(u, d, sigma2_eps_delta, kind),
    }
}

fn unit_ball(d: usize, st: &mut Stream) -> Vec<f64> {
    loop {
        let g = st.gaussian_vec(d, 1.0);
        let norm = libm::sqrt(g.iter().map(|v| v * v).sum::<f64>());
        if norm > 0.0 {
            let radius = libm::pow(st.uniform(), 1.0 / d as f64);
            return g.iter().map(|v| v * radius / norm).collect();
        }
    }
}

impl PreparedTrial {
    fn trial_seed(&self, idx: u64) -> Seed {
        self.spec.master_seed.child(b"cordp/trial", &[idx])
    }

    /// Analytic MSE with `u` responders, using the design parameters.
    pub fn analytic_mse(&self, u: usize) -> Result<f64> {
        let s = &self.spec;
        mechanism_mse(s.mechanism, &self.params, self.sigma2_eps_delta, u, s.cfg.d(), s.estimator)
    }

    /// As [`PreparedTrial::analytic_mse`] for the finite parameters sampled.
    pub fn sampled_analytic_mse(&self, u: usize) -> Result<f64> {
        let s = &self.spec;
        mechanism_mse(s.mechanism, &self.sampled, self.sigma2_eps_delta, u, s.cfg.d(), s.estimator)
    }

    fn responding_set(&self, st: &mut Stream) -> Vec<usize> {
        let s = &self.spec;
        let (n, t) = (s.cfg.n(), s.cfg.t());
        let u = match s.responding_mode {
            RespondingMode::ExactT => t,
            RespondingMode::All => n,
            RespondingMode::RandomGeqT => t + st.below((n - t + 1) as u64) as usize,
        };
        if s.allow_colluder_dropout || s.colluding_set.is_empty() {
            return st.subset(n, u);
        }
        let others: Vec<usize> = (0..n).filter(|j| !s.colluding_set.contains(j)).collect();
        let k = u - s.colluding_set.len();
        let mut set: Vec<usize> = st.subset(others.len(), k).into_iter().map(|i| others[i]).collect();
        set.extend_from_slice(&s.colluding_set);
        set.sort_unstable();
        set
    }

    fn inputs(&self, st: &mut Stream) -> Vec<Vec<f64>> {
        let (n, d) = (self.spec.cfg.n(), self.spec.cfg.d());
        match &self.spec.input_mode {
            InputMode::WorstCaseEqualSphere => {
                let mut e = vec![0.0; d];
                e[0] = 1.0;
                vec![e; n]
            }
            InputMode::RandomBall => (0..n).map(|_| unit_ball(d, st)).collect(),
            InputMode::Fixed(xs) => xs.clone(),
        }
    }

    /// Noise of every user for one trial.
    fn noise(&self, seed: &Seed) -> Result<Vec<Vec<f64>>> {
        let book = deal_seeds(self.spec.cfg.n(), &seed.child(b"cordp/noise", &[]))?;
        generate_all_noise(&book, &self.sampled, self.spec.cfg.d())
    }

    /// One trial; deterministic in `(master_seed, idx)`.
    pub fn run_trial(&self, idx: u64) -> Result<TrialResult> {
        let spec = &self.spec;
        let d = spec.cfg.d();
        let seed = self.trial_seed(idx);
        let xs = self.inputs(&mut seed.child(b"cordp/inputs", &[]).stream());
        let set = self.responding_set(&mut seed.child(b"cordp/responding", &[]).stream());
        let u = set.len();
        let mut true_mean = vec![0.0; d];
        for &i in &set {
            for (m, x) in true_mean.iter_mut().zip(&xs[i]) {
                *m += x / u as f64;
            }
        }
        let estimate = match spec.mechanism {
            Mechanism::CorDp | Mechanism::Ldp => {
                let zs = self.noise(&seed)?;
                let v = effective_aggregate_variance(&self.sampled, u)?;
                let alpha = match spec.estimator {
                    EstimatorKind::Unbiased => 1.0,
                    EstimatorKind::BiasedOptimal => 1.0 / (1.0 + d as f64 * v / u as f64),
                };
                let mut est = vec![0.0; d];
                for &i in &set {
                    let y = encode(i, &xs[i], &zs[i])?;
                    for (e, p) in est.iter_mut().zip(&y.payload) {
                        *e += alpha * p / u as f64;
                    }
                }
                est
            }
            Mechanism::Cdp | Mechanism::SecAggIdeal => {
                for x in &xs {
                    encode(0, x, &vec![0.0; d])?;
                }
                let var = central_variance(self.sigma2_eps_delta, u);
                let noise = seed.child(b"cordp/central", &[]).stream().gaussian_vec(d, libm::sqrt(var));
                let alpha = match spec.estimator {
                    EstimatorKind::Unbiased => 1.0,
                    EstimatorKind::BiasedOptimal => 1.0 / (1.0 + d as f64 * var),
                };
                true_mean.iter().zip(&noise).map(|(m, z)| alpha * (m + z)).collect()
            }
        };
        let squared_error = estimate.iter().zip(&true_mean).map(|(e, m)| (e - m) * (e - m)).sum();
        Ok(TrialResult { trial_index: idx, squared_error, u_size: u, estimate, true_mean })
    }
}

/// One trial of `spec`.
pub fn run_trial(spec: &TrialSpec, idx: u64) -> Result<TrialResult> {
    spec.prepare()?.run_trial(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub trials: usize,
    pub mean_mse: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `u_size -> (trials, mean squared error)`.
    pub per_u_size: BTreeMap<usize, (usize, f64)>,
    /// Mean of `estimate - true_mean` per coordinate.
    pub mean_error: Vec<f64>,
    /// Standard error of each entry of `mean_error`.
    pub mean_error_se: Vec<f64>,
}

const Z95: f64 = 1.959_963_984_540_054;

/// Aggregates results in the order given.
pub fn summarize(results: &[TrialResult]) -> Result<ExperimentSummary> {
    let m = results.len();
    if m < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: m });
    }
    let mf = m as f64;
    let d = results[0].estimate.len();
    let mean = results.iter().map(|r| r.squared_error).sum::<f64>() / mf;
    let var = results.iter().map(|r| (r.squared_error - mean) * (r.squared_error - mean)).sum::<f64>() / (mf - 1.0);
    let se = libm::sqrt(var / mf);
    let mut per: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for r in results {
        let e = per.entry(r.u_size).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += r.squared_error;
    }
    for v in per.values_mut() {
        v.1 /= v.0 as f64;
    }
    let mut mean_error = vec![0.0; d];
    for r in results {
        for (m, (e, x)) in mean_error.iter_mut().zip(r.estimate.iter().zip(&r.true_mean)) {
            *m += (e - x) / mf;
        }
    }
    let mut mean_error_se = vec![0.0; d];
    for r in results {
        for k in 0..d {
            let dev = r.estimate[k] - r.true_mean[k] - mean_error[k];
            mean_error_se[k] += dev * dev / (mf - 1.0);
        }
    }
    for s in &mut mean_error_se {
        *s = libm::sqrt(*s / mf);
    }
    Ok(ExperimentSummary {
        trials: m,
        mean_mse: mean,
        std_error: se,
        ci_low: mean - Z95 * se,
        ci_high: mean + Z95 * se,
        per_u_size: per,
        mean_error,
        mean_error_se,
    })
}

/// Runs trials `0..trials` and summarises them.
pub fn run_experiment(spec: &TrialSpec, trials: usize) -> Result<ExperimentSummary> {
    if trials < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: trials });
    }
    let prepared = spec.prepare()?;
    let results = (0..trials as u64).map(|i| prepared.run_trial(i)).collect::<Result<Vec<_>>>()?;
    summarize(&results)
}

/// Residual-variance estimate from [`adversary_conditional_stats`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalStats {
    pub residual_variance: f64,
    /// Approximate standard error, `v * sqrt(2 / (m - p))`.
    pub std_error: f64,
    pub features: usize,
    pub trials: usize,
}

/// Least-squares residual variance of the target's noise (coordinate 0)
/// given what the server can observe: the noise in every other honest
/// user's payload (inputs known) and every colluder's pads and private
/// noise.
pub fn adversary_conditional_stats(spec: &TrialSpec, target: usize, trials: usize) -> Result<ConditionalStats> {
    let prepared = spec.prepare()?;
    let n = spec.cfg.n();
    if target >= n || spec.colluding_set.contains(&target) {
        return Err(Error::Config(format!("target {target} must be an honest user")));
    }
    if !matches!(spec.mechanism, Mechanism::CorDp | Mechanism::Ldp) {
        return Err(Error::Unsupported("conditional statistics need per-user noise".into()));
    }
    let (sigma2, rho) = match prepared.sampled {
        NoiseParams::Finite { sigma2, rho } => (sigma2, rho),
        NoiseParams::Limit { .. } => unreachable!("sampled parameters are finite"),
    };
    let col = &spec.colluding_set;
    let honest: Vec<usize> = (0..n).filter(|&k| k != target && !col.contains(&k)).collect();
    let mut col_pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if col.contains(&i) || col.contains(&j) {
                col_pairs.push((i, j));
            }
        }
    }
    let p = honest.len() + col_pairs.len() + col.len();
    if trials <= p + 1 {
        return Err(Error::InsufficientSamples { needed: p + 2, got: trials });
    }
    let pad_var = -rho * sigma2;
    let own_var = (sigma2 * (1.0 + rho * (n as f64 - 1.0))).max(0.0);
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut yty = 0.0;
    let mut feat = vec![0.0; p];
    for idx in 0..trials as u64 {
        let seed = prepared.trial_seed(idx).child(b"cordp/noise", &[]);
        let book = deal_seeds(n, &seed)?;
        let zs = generate_all_noise(&book, &prepared.sampled, 1)?;
        let mut f = 0;
        for &k in &honest {
            feat[f] = zs[k][0];
            f += 1;
        }
        for &(i, j) in &col_pairs {
            feat[f] = if pad_var > 0.0 {
                book.pair(i, j)?.seed.stream().gaussian() * libm::sqrt(pad_var)
            } else {
                0.0
            };
            f += 1;
        }
        for &j in col {
            feat[f] = if own_var > 0.0 { book.own(j)?.stream().gaussian() * libm::sqrt(own_var) } else { 0.0 };
            f += 1;
        }
        let y = zs[target][0];
        yty += y * y;
        for a in 0..p {
            xty[a] += feat[a] * y;
            for b in 0..=a {
                xtx[a * p + b] += feat[a] * feat[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[b * p + a] = xtx[a * p + b];
        }
    }
    let m = trials as f64;
    let residual = if p == 0 {
        yty
    } else {
        let gram = CovarianceMatrix::new(p, xtx.iter().map(|v| v / m).collect())
            .map_err(|e| Error::Conditioning(format!("regression design is singular: {e}")))?;
        let inv = gram.inverse()?;
        let xty_m: Vec<f64> = xty.iter().map(|v| v / m).collect();
        let quad: f64 = (0..p).map(|a| (0..p).map(|b| xty_m[a] * inv[a * p + b] * xty_m[b]).sum::<f64>()).sum();
        yty - m * quad
    };
    let v = residual / (m - p as f64);
    Ok(ConditionalStats {
        residual_variance: v,
        std_error: v * libm::sqrt(2.0 / (m - p as f64)),
        features: p,
        trials,
    })
}
