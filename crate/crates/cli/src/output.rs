use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::CliResult;

/// One line of the results table. Column order is part of the format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub mechanism: &'static str,
    pub n: usize,
    pub t: usize,
    pub c: usize,
    pub d: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub u_size: usize,
    pub estimator: &'static str,
    pub sigma2_star: f64,
    pub rho_star: f64,
    pub analytic_mse: f64,
    pub empirical_mse: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub trials: usize,
    pub seed: u64,
}

pub const HEADER: &str = "mechanism,n,t,c,d,epsilon,delta,u_size,estimator,sigma2_star,rho_star,analytic_mse,empirical_mse,ci_low,ci_high,trials,seed";

pub fn to_csv(rows: &[CsvRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// Writes `bytes` to `path` through a sibling temporary file, so a failed
/// run never leaves a truncated table behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    let tmp = path.with_file_name(format!(".{name}.{}.partial", std::process::id()));
    let result = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
