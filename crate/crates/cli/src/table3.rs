//! Optimal parameters for ten users, five dimensions, `(2, 1e-5)`-DP,
//! printed next to the published values.

use std::fmt::Write;

use cordp_core::calibration::{sigma_eps_delta, DEFAULT_TOL};
use cordp_core::optimizer::{analytic_mse, optimal_params_for, worst_case_mse};
use cordp_core::{EstimatorKind, NoiseParams, PrivacyBudget, SystemConfig};

use crate::error::CliResult;

/// Published value of a cell; `None` marks an unbounded entry.
type Published = Option<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub label: String,
    pub sigma2: f64,
    pub rho: f64,
    pub biased: f64,
    pub unbiased: f64,
    pub published: [Published; 4],
}

impl Column {
    fn values(&self) -> [f64; 4] {
        [self.sigma2, self.rho, self.biased, self.unbiased]
    }

    /// Relative deviations from the published cells, skipping unbounded ones.
    pub fn deviations(&self) -> [Option<f64>; 4] {
        let v = self.values();
        core::array::from_fn(|k| self.published[k].map(|p| ((v[k] - p) / p).abs()))
    }
}

const N: usize = 10;
const D: usize = 5;

pub fn columns() -> CliResult<Vec<Column>> {
    let budget = PrivacyBudget::new(2.0, 1e-5)?;
    let s = sigma_eps_delta(&budget, DEFAULT_TOL)?.sigma2_eps_delta;
    let table: [(usize, usize, [Published; 4]); 4] = [
        (10, 0, [None, Some(-0.111), Some(0.166), Some(0.199)]),
        (10, 2, [None, Some(-0.111), Some(0.199), Some(0.248)]),
        (8, 0, [Some(5.466), Some(-0.091), Some(0.554), Some(1.242)]),
        (8, 2, [Some(6.318), Some(-0.089), Some(0.598), Some(1.488)]),
    ];
    let mut out = Vec::new();
    for (t, c, published) in table {
        let cfg = SystemConfig::new(N, t, c, D)?;
        let p = optimal_params_for(&cfg, s)?;
        out.push(Column {
            label: format!("CorDP t={t} c={c}"),
            sigma2: p.sigma2().unwrap_or(f64::INFINITY),
            rho: p.rho(),
            biased: worst_case_mse(&cfg, &p, EstimatorKind::BiasedOptimal)?.mse,
            unbiased: worst_case_mse(&cfg, &p, EstimatorKind::Unbiased)?.mse,
            published,
        });
    }
    let ldp = NoiseParams::finite(s, 0.0)?;
    out.push(Column {
        label: "LDP".into(),
        sigma2: s,
        rho: 0.0,
        biased: analytic_mse(N, D, &ldp, EstimatorKind::BiasedOptimal)?,
        unbiased: analytic_mse(N, D, &ldp, EstimatorKind::Unbiased)?,
        published: [Some(3.975), None, Some(0.665), Some(1.988)],
    });
    Ok(out)
}

fn cell(v: f64) -> String {
    if v.is_infinite() {
        "→∞".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn report() -> CliResult<String> {
    let cols = columns()?;
    let mut s = String::new();
    let _ = writeln!(s, "n={N} d={D} eps=2 delta=1e-5");
    let _ = writeln!(
        s,
        "{:<16} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8}",
        "column", "sigma2*", "published", "rho*", "published", "biased", "published", "unbiased", "published", "max dev"
    );
    for c in &cols {
        let v = c.values();
        let mut line = format!("{:<16}", c.label);
        for k in 0..4 {
            let published = match (k, c.published[k]) {
                (0, None) if v[0].is_infinite() => "→∞".to_string(),
                (_, None) => "0".to_string(),
                (_, Some(p)) => format!("{p}"),
            };
            let _ = write!(line, " {:>9} {:>9}", cell(v[k]), published);
        }
        let dev = c.deviations().iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let _ = writeln!(s, "{line} {:>7.3}%", 100.0 * dev);
    }
    let _ = writeln!(s, "limit columns: sigma2* is unbounded, the MSE is its limit");
    Ok(s)
}
