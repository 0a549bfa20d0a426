use rayon::prelude::*;

use cordp_core::calibration::{sigma_eps_delta, DEFAULT_TOL};
use cordp_core::simulator::{mechanism_mse, summarize, Mechanism, TrialResult};
use cordp_core::{NoiseParams, SystemConfig};

use crate::config::{estimator_name, mechanism_name, ExperimentSpec, Point};
use crate::error::{CliError, CliResult};
use crate::output::CsvRow;

/// Evaluates every sweep point; rows come back in sweep order, then by
/// responding size.
pub fn run(spec: &ExperimentSpec) -> CliResult<Vec<CsvRow>> {
    let points = spec.points().map_err(|e| CliError::Config(e.to_string()))?;
    let jobs: Vec<(&Point, usize)> = points.iter().flat_map(|p| p.u_sizes.iter().map(move |&u| (p, u))).collect();
    jobs.par_iter().map(|&(p, u)| run_point(spec, p, u)).collect()
}

fn run_point(spec: &ExperimentSpec, point: &Point, u: usize) -> CliResult<CsvRow> {
    let ts = &point.spec;
    let s = sigma_eps_delta(&ts.budget, DEFAULT_TOL)?.sigma2_eps_delta;
    let prepared = ts.prepare_with(s)?;
    let (n, t, c, d) = (ts.cfg.n(), ts.cfg.t(), ts.cfg.c(), ts.cfg.d());
    let (sigma2_star, rho_star) = match ts.mechanism {
        Mechanism::CorDp => match prepared.params {
            NoiseParams::Finite { sigma2, rho } => (sigma2, rho),
            NoiseParams::Limit { rho, .. } => (f64::INFINITY, rho),
        },
        // Noise on each response for local, on the exact sum for central.
        Mechanism::Ldp | Mechanism::Cdp | Mechanism::SecAggIdeal => (s, 0.0),
    };
    let analytic = mechanism_mse(ts.mechanism, &prepared.params, s, u, d, ts.estimator)?;
    let (mut empirical, mut lo, mut hi) = (None, None, None);
    if !spec.analytic_only && spec.trials > 0 {
        // Simulate exactly `u` responders under the design made for `t`.
        let prepared = if u == t {
            prepared
        } else {
            let mut at_u = ts.clone();
            at_u.cfg = SystemConfig::new(n, u, c, d)?;
            at_u.noise_override = Some(prepared.params);
            at_u.prepare_with(s)?
        };
        let results: Vec<TrialResult> =
            (0..spec.trials as u64).into_par_iter().map(|i| prepared.run_trial(i)).collect::<Result<_, _>>()?;
        let sum = summarize(&results)?;
        empirical = Some(sum.mean_mse);
        lo = Some(sum.ci_low);
        hi = Some(sum.ci_high);
    }
    Ok(CsvRow {
        mechanism: mechanism_name(ts.mechanism),
        n,
        t,
        c,
        d,
        epsilon: ts.budget.epsilon(),
        delta: ts.budget.delta(),
        u_size: u,
        estimator: estimator_name(ts.estimator),
        sigma2_star,
        rho_star,
        analytic_mse: analytic,
        empirical_mse: empirical,
        ci_low: lo,
        ci_high: hi,
        trials: if spec.analytic_only { 0 } else { spec.trials },
        seed: spec.base.seed,
    })
}
