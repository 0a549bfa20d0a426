//! Flat `key = value` experiment documents.
//!
//! One assignment per line, `#` starts a comment, list values are
//! comma-separated and integer ranges may be written `a..b` (inclusive).
//! At most one key may hold a list; that key becomes the sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use cordp_core::rng::Seed;
use cordp_core::simulator::{InputMode, Mechanism, RespondingMode, TrialSpec, DEFAULT_SIGMA_CAP};
use cordp_core::{EstimatorKind, PrivacyBudget, SystemConfig};

use crate::error::{CliError, CliResult};

/// Where an assignment came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag,
    Env,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(l) => write!(f, "line {l}"),
            Origin::Flag => f.write_str("command line"),
            Origin::Env => f.write_str("environment"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: Origin,
}

impl Assignment {
    pub fn new(key: &str, value: impl Into<String>, origin: Origin) -> Self {
        Self { key: key.to_string(), value: value.into(), origin }
    }
}

const KEYS: &[&str] = &[
    "name", "mechanism", "n", "t", "c", "d", "eps", "delta", "trials", "estimator", "seed", "out",
    "analytic_only", "responding", "inputs", "sigma_cap",
];

fn canonical(key: &str) -> &str {
    match key {
        "mode" => "mechanism",
        "epsilon" => "eps",
        other => other,
    }
}

/// Splits a document into assignments. Repeated keys are errors.
pub fn parse_assignments(text: &str) -> CliResult<Vec<Assignment>> {
    let mut out: Vec<Assignment> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {line}: expected `key = value`, got `{body}`")))?;
        let key = canonical(k.trim());
        let value = v.trim();
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("line {line}: unknown key `{}`", k.trim())));
        }
        if value.is_empty() {
            return Err(CliError::Config(format!("line {line}: key `{key}` has no value")));
        }
        if let Some(prev) = out.iter().find(|a| a.key == key) {
            return Err(CliError::Config(format!("line {line}: key `{key}` already set at {}", prev.origin)));
        }
        out.push(Assignment::new(key, value, Origin::Line(line)));
    }
    Ok(out)
}

/// The varied parameter of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    None,
    Epsilon(Vec<f64>),
    /// Each value `u` sets both the threshold and the responding size.
    Responding(Vec<usize>),
    Collusion(Vec<usize>),
    Mechanism(Vec<Mechanism>),
}

impl Sweep {
    pub fn len(&self) -> usize {
        match self {
            Sweep::None => 1,
            Sweep::Epsilon(v) => v.len(),
            Sweep::Responding(v) | Sweep::Collusion(v) => v.len(),
            Sweep::Mechanism(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn describe(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        match self {
            Sweep::None => "none".into(),
            Sweep::Epsilon(v) => format!("eps={}", join(v.iter().map(|x| x.to_string()).collect())),
            Sweep::Responding(v) => format!("responding={}", join(v.iter().map(|x| x.to_string()).collect())),
            Sweep::Collusion(v) => format!("c={}", join(v.iter().map(|x| x.to_string()).collect())),
            Sweep::Mechanism(v) => format!("mechanism={}", join(v.iter().map(|m| mechanism_name(*m).into()).collect())),
        }
    }
}

/// Parameters shared by every sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct Base {
    pub mechanism: Mechanism,
    pub n: usize,
    /// Absent only under a responding sweep.
    pub t: Option<usize>,
    pub c: usize,
    pub d: usize,
    pub eps: f64,
    pub delta: f64,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub inputs: InputMode,
    pub sigma_cap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: Base,
    pub sweep: Sweep,
    pub trials: usize,
    pub analytic_only: bool,
    pub out: Option<PathBuf>,
}

/// One resolved sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    /// Design threshold `t` lives in `spec.cfg`.
    pub spec: TrialSpec,
    /// Responding sizes to evaluate, ascending.
    pub u_sizes: Vec<usize>,
}

pub fn mechanism_name(m: Mechanism) -> &'static str {
    match m {
        Mechanism::CorDp => "cordp",
        Mechanism::Ldp => "ldp",
        Mechanism::Cdp => "cdp",
        Mechanism::SecAggIdeal => "secagg",
    }
}

pub fn estimator_name(k: EstimatorKind) -> &'static str {
    match k {
        EstimatorKind::BiasedOptimal => "biased",
        EstimatorKind::Unbiased => "unbiased",
    }
}

fn bad(a: &Assignment, what: impl fmt::Display) -> CliError {
    CliError::Config(format!("{}: key `{}`: {what}", a.origin, a.key))
}

fn parse_mechanism(a: &Assignment, s: &str) -> CliResult<Mechanism> {
    match s {
        "cordp" => Ok(Mechanism::CorDp),
        "ldp" => Ok(Mechanism::Ldp),
        "cdp" => Ok(Mechanism::Cdp),
        "secagg" => Ok(Mechanism::SecAggIdeal),
        _ => Err(bad(a, format!("unknown mechanism `{s}` (cordp, ldp, cdp, secagg)"))),
    }
}

fn scalar<T: std::str::FromStr>(a: &Assignment, s: &str) -> CliResult<T> {
    s.parse().map_err(|_| bad(a, format!("cannot parse `{s}`")))
}

fn items(value: &str) -> Vec<&str> {
    value.split(',').map(str::trim).collect()
}

fn usize_list(a: &Assignment) -> CliResult<Vec<usize>> {
    let mut out = Vec::new();
    for item in items(&a.value) {
        if let Some((lo, hi)) = item.split_once("..") {
            let (lo, hi): (usize, usize) = (scalar(a, lo.trim())?, scalar(a, hi.trim())?);
            if lo > hi {
                return Err(bad(a, format!("empty range `{item}`")));
            }
            out.extend(lo..=hi);
        } else {
            out.push(scalar(a, item)?);
        }
    }
    Ok(out)
}

fn is_list(a: &Assignment) -> bool {
    a.value.contains(',') || a.value.contains("..")
}

/// Parses and validates a document.
pub fn parse_config(text: &str) -> CliResult<ExperimentSpec> {
    resolve(parse_assignments(text)?)
}

/// Builds a spec from assignments; later assignments override earlier ones.
pub fn resolve(assignments: Vec<Assignment>) -> CliResult<ExperimentSpec> {
    let mut map: BTreeMap<String, Assignment> = BTreeMap::new();
    for a in assignments {
        let key = canonical(&a.key).to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Config(format!("{}: unknown key `{}`", a.origin, a.key)));
        }
        map.insert(key.clone(), Assignment { key, ..a });
    }
    let get = |k: &str| map.get(k);
    let need = |k: &str| get(k).ok_or_else(|| CliError::Config(format!("missing required key `{k}`")));

    let listed: Vec<&Assignment> = ["eps", "c", "mechanism", "responding"]
        .iter()
        .filter_map(|k| get(k))
        .filter(|a| is_list(a) || a.key == "responding")
        .collect();
    if listed.len() > 1 {
        return Err(bad(listed[1], format!("only one sweep allowed, `{}` already sweeps", listed[0].key)));
    }
    let sweep_key = listed.first().map(|a| a.key.clone());
    let sweeps = |k: &str| sweep_key.as_deref() == Some(k);

    let mech_a = need("mechanism")?;
    let mechanisms: Vec<Mechanism> =
        items(&mech_a.value).into_iter().map(|s| parse_mechanism(mech_a, s)).collect::<CliResult<_>>()?;
    let n: usize = scalar(need("n")?, &need("n")?.value)?;
    let d: usize = scalar(need("d")?, &need("d")?.value)?;
    let eps_a = need("eps")?;
    let eps_list: Vec<f64> = items(&eps_a.value).into_iter().map(|s| scalar(eps_a, s)).collect::<CliResult<_>>()?;
    let delta: f64 = scalar(need("delta")?, &need("delta")?.value)?;
    let c_list = match get("c") {
        Some(a) => usize_list(a)?,
        None => vec![0],
    };
    let t = match get("t") {
        Some(a) if sweeps("responding") => return Err(bad(a, "cannot be combined with a responding sweep")),
        Some(a) => Some(scalar(a, &a.value)?),
        None if sweeps("responding") => None,
        None => return Err(CliError::Config("missing required key `t`".into())),
    };
    let estimator = match get("estimator").map(|a| (a, a.value.as_str())) {
        None | Some((_, "biased")) => EstimatorKind::BiasedOptimal,
        Some((_, "unbiased")) => EstimatorKind::Unbiased,
        Some((a, s)) => return Err(bad(a, format!("unknown estimator `{s}` (biased, unbiased)"))),
    };
    let seed = match get("seed") {
        Some(a) => scalar(a, &a.value)?,
        None => 0,
    };
    let inputs = match get("inputs").map(|a| (a, a.value.as_str())) {
        None | Some((_, "worst")) => InputMode::WorstCaseEqualSphere,
        Some((_, "ball")) => InputMode::RandomBall,
        Some((a, s)) => return Err(bad(a, format!("unknown input mode `{s}` (worst, ball)"))),
    };
    let sigma_cap = match get("sigma_cap") {
        Some(a) => scalar(a, &a.value)?,
        None => DEFAULT_SIGMA_CAP,
    };
    let analytic_only = match get("analytic_only") {
        Some(a) => scalar::<bool>(a, &a.value)?,
        None => false,
    };
    let trials = match get("trials") {
        Some(a) => scalar(a, &a.value)?,
        None if analytic_only => 0,
        None => 20,
    };
    if !analytic_only && trials < 2 {
        let a = get("trials");
        let msg = format!("empirical runs need at least 2 trials, got {trials}");
        return Err(a.map_or_else(|| CliError::Config(msg.clone()), |a| bad(a, &msg)));
    }

    let sweep = match sweep_key.as_deref() {
        None => Sweep::None,
        Some("eps") => Sweep::Epsilon(eps_list.clone()),
        Some("c") => Sweep::Collusion(c_list.clone()),
        Some("mechanism") => Sweep::Mechanism(mechanisms.clone()),
        Some(_) => Sweep::Responding(usize_list(get("responding").unwrap())?),
    };
    if sweep.is_empty() {
        return Err(CliError::Config("sweep has no values".into()));
    }

    let spec = ExperimentSpec {
        name: get("name").map_or_else(|| "experiment".to_string(), |a| a.value.clone()),
        base: Base {
            mechanism: mechanisms[0],
            n,
            t,
            c: c_list[0],
            d,
            eps: eps_list[0],
            delta,
            estimator,
            seed,
            inputs,
            sigma_cap,
        },
        sweep,
        trials,
        analytic_only,
        out: get("out").map(|a| PathBuf::from(&a.value)),
    };
    // Every point must yield a valid trial.
    let points = spec.points().map_err(|e| {
        let key = match &e {
            PointError::Threshold { .. } => "c",
            PointError::Budget(_) => "eps",
            PointError::Other(_) => "n",
        };
        let origin = map.get(key).map_or_else(|| "config".to_string(), |a| a.origin.to_string());
        CliError::Config(format!("{origin}: key `{key}`: {e}"))
    })?;
    for p in &points {
        p.spec.prepare_with(1.0).map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(spec)
}

#[derive(Debug)]
pub enum PointError {
    Threshold { c: usize, t: usize },
    Budget(String),
    Other(String),
}

impl fmt::Display for PointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PointError::Threshold { c, t } => write!(f, "need c < t, got c={c}, t={t}"),
            PointError::Budget(s) | PointError::Other(s) => f.write_str(s),
        }
    }
}

impl ExperimentSpec {
    /// Expands the sweep into trial specs in sweep order. A responding
    /// sweep evaluates each design at its own threshold; otherwise every
    /// size from `t` to `n` is evaluated.
    pub fn points(&self) -> Result<Vec<Point>, PointError> {
        let b = &self.base;
        let swept_t = matches!(self.sweep, Sweep::Responding(_));
        let make = |mech: Mechanism, t: usize, c: usize, eps: f64| -> Result<Point, PointError> {
            if c >= t {
                return Err(PointError::Threshold { c, t });
            }
            let cfg = SystemConfig::new(b.n, t, c, b.d).map_err(|e| PointError::Other(e.to_string()))?;
            let budget = PrivacyBudget::new(eps, b.delta).map_err(|e| PointError::Budget(e.to_string()))?;
            let mut spec = TrialSpec::new(cfg, budget, mech, b.estimator);
            spec.input_mode = b.inputs.clone();
            spec.responding_mode = RespondingMode::ExactT;
            spec.colluding_set = (0..c).collect();
            spec.master_seed = Seed::from_u64(b.seed);
            spec.sigma_cap_multiplier = b.sigma_cap;
            let u_sizes = if swept_t { vec![t] } else { (t..=b.n).collect() };
            Ok(Point { spec, u_sizes })
        };
        let t = b.t.unwrap_or(b.n);
        match &self.sweep {
            Sweep::None => Ok(vec![make(b.mechanism, t, b.c, b.eps)?]),
            Sweep::Epsilon(v) => v.iter().map(|&e| make(b.mechanism, t, b.c, e)).collect(),
            Sweep::Collusion(v) => v.iter().map(|&c| make(b.mechanism, t, c, b.eps)).collect(),
            Sweep::Mechanism(v) => v.iter().map(|&m| make(m, t, b.c, b.eps)).collect(),
            Sweep::Responding(v) => v.iter().map(|&u| make(b.mechanism, u, b.c, b.eps)).collect(),
        }
    }

    /// One-line summary of the resolved parameters.
    pub fn describe(&self) -> String {
        let b = &self.base;
        format!(
            "name={} mechanism={} n={} t={} c={} d={} eps={} delta={} estimator={} trials={} analytic_only={} seed={} sweep={} out={}",
            self.name,
            mechanism_name(b.mechanism),
            b.n,
            b.t.map_or_else(|| "swept".to_string(), |t| t.to_string()),
            b.c,
            b.d,
            b.eps,
            b.delta,
            estimator_name(b.estimator),
            self.trials,
            self.analytic_only,
            b.seed,
            self.sweep.describe(),
            self.out.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "n = 10\nt = 8\nc = 0\nd = 5\neps = 2\ndelta = 1e-5\nmechanism = cordp\ntrials = 100\n";

    #[test]
    fn minimal_document() {
        let s = parse_config(MINIMAL).unwrap();
        assert_eq!(s.base.t, Some(8));
        assert_eq!(s.base.estimator, EstimatorKind::BiasedOptimal);
        assert_eq!(s.base.seed, 0);
        assert_eq!(s.sweep, Sweep::None);
        assert_eq!(s.trials, 100);
        let pts = s.points().unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].u_sizes, vec![8, 9, 10]);
    }

    #[test]
    fn comments_and_aliases() {
        let s = parse_config("# header\nmode = ldp  # inline\nn=4\nt=3\nd=1\nepsilon=1\ndelta=1e-6\nanalytic_only=true\n").unwrap();
        assert_eq!(s.base.mechanism, Mechanism::Ldp);
        assert_eq!(s.trials, 0);
    }

    #[test]
    fn collusion_above_threshold() {
        let e = parse_config(&MINIMAL.replace("c = 0", "c = 12").replace("t = 8", "t = 10")).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("c < t") && msg.contains("line 3"), "{msg}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn epsilon_sweep() {
        let s = parse_config(&MINIMAL.replace("eps = 2", "eps = 0.5,1,2,4")).unwrap();
        let pts = s.points().unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[3].spec.budget.epsilon(), 4.0);
    }

    #[test]
    fn responding_range() {
        let doc = "mechanism = cordp\nn = 100\nd = 20\neps = 2\ndelta = 1e-5\nresponding = 1..100\nanalytic_only = true\n";
        let pts = parse_config(doc).unwrap().points().unwrap();
        assert_eq!(pts.len(), 100);
        assert_eq!((pts[0].u_sizes.clone(), pts[99].spec.cfg.t()), (vec![1], 100));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_config(&format!("{MINIMAL}epsilom = 3\n")).unwrap_err().to_string();
        assert!(e.contains("line 9") && e.contains("epsilom"), "{e}");
        let e = parse_config(&format!("{MINIMAL}n = 3\n")).unwrap_err().to_string();
        assert!(e.contains("line 9") && e.contains("already set"), "{e}");
        let e = parse_config("n 10\n").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        let e = parse_config(&MINIMAL.replace("n = 10", "n = ten")).unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("ten"), "{e}");
    }

    #[test]
    fn single_sweep_only() {
        let doc = MINIMAL.replace("eps = 2", "eps = 1,2").replace("c = 0", "c = 0,1");
        assert!(parse_config(&doc).unwrap_err().to_string().contains("only one sweep"));
    }

    #[test]
    fn missing_and_invalid_values() {
        assert!(parse_config(&MINIMAL.replace("d = 5\n", "")).is_err());
        assert!(parse_config(&MINIMAL.replace("delta = 1e-5", "delta = 2")).is_err());
        assert!(parse_config(&MINIMAL.replace("trials = 100", "trials = 1")).is_err());
        assert!(parse_config(&MINIMAL.replace("cordp", "magic")).is_err());
        assert!(parse_config(&format!("{MINIMAL}estimator = best\n")).is_err());
    }

    #[test]
    fn later_assignments_override() {
        let mut a = parse_assignments(MINIMAL).unwrap();
        a.push(Assignment::new("t", "9", Origin::Flag));
        assert_eq!(resolve(a).unwrap().base.t, Some(9));
    }
}
