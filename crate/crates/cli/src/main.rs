use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cordp_cli::config::{parse_assignments, resolve, Assignment, Origin};
use cordp_cli::output::{to_csv, write_atomic};
use cordp_cli::secagg_cmd::{write_delayed, write_transcript, DropoutSchedule, SecAggOptions};
use cordp_cli::{runner, table3, CliError, CliResult};
use cordp_core::secagg_toy::DEFAULT_Q;

/// Correlated-noise private mean estimation experiments.
#[derive(Parser)]
#[command(name = "cordp", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Print the ten-user comparison table against published values.
    Table3,
    /// Run the secure aggregation toy and print its transcript as JSON lines.
    Secagg(SecaggArgs),
}

/// Flags override the matching keys of `--config`.
#[derive(Args)]
struct RunArgs {
    /// Experiment document (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// cordp, ldp, cdp or secagg.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    t: Option<String>,
    #[arg(long)]
    c: Option<String>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    /// biased or unbiased.
    #[arg(long)]
    estimator: Option<String>,
    /// Master seed; falls back to CORDP_SEED, then 0.
    #[arg(long)]
    seed: Option<String>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    analytic_only: bool,
    /// `key=values` with key eps, c, mechanism or responding,
    /// e.g. `responding=1..100` or `eps=0.5,1,2`.
    #[arg(long)]
    sweep: Option<String>,
    /// worst or ball.
    #[arg(long)]
    inputs: Option<String>,
}

#[derive(Args)]
struct SecaggArgs {
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    t: usize,
    /// Prime field modulus.
    #[arg(long, default_value_t = DEFAULT_Q)]
    q: u64,
    /// Comma-separated inputs; defaults to 1, 2, ..., n.
    #[arg(long, value_delimiter = ',')]
    inputs: Option<Vec<u64>>,
    /// Users dropping before the next online round; repeat per round.
    #[arg(long = "drop", value_name = "USERS")]
    drops: Vec<String>,
    #[arg(long)]
    no_blinding: bool,
    #[arg(long, env = "CORDP_SEED", default_value_t = 0)]
    seed: u64,
    /// Run the delayed-upload scenario instead.
    #[arg(long)]
    delayed: bool,
}

fn assignments(args: &RunArgs) -> CliResult<Vec<Assignment>> {
    let mut out = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            parse_assignments(&text)?
        }
        None => Vec::new(),
    };
    let flags: [(&str, &Option<String>); 11] = [
        ("mechanism", &args.mode),
        ("n", &args.n),
        ("t", &args.t),
        ("c", &args.c),
        ("d", &args.d),
        ("eps", &args.eps),
        ("delta", &args.delta),
        ("trials", &args.trials),
        ("estimator", &args.estimator),
        ("seed", &args.seed),
        ("inputs", &args.inputs),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            out.push(Assignment::new(k, v.clone(), Origin::Flag));
        }
    }
    if let Some(p) = &args.out {
        out.push(Assignment::new("out", p.display().to_string(), Origin::Flag));
    }
    if args.analytic_only {
        out.push(Assignment::new("analytic_only", "true", Origin::Flag));
    }
    if let Some(s) = &args.sweep {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--sweep expects key=values, got `{s}`")))?;
        out.push(Assignment::new(k.trim(), v.trim(), Origin::Flag));
    }
    if !out.iter().any(|a| a.key == "seed") {
        if let Ok(v) = std::env::var("CORDP_SEED") {
            out.insert(0, Assignment::new("seed", v, Origin::Env));
        }
    }
    Ok(out)
}

fn run_experiment(args: &RunArgs) -> CliResult<()> {
    if args.config.is_none() && args.mode.is_none() {
        return Err(CliError::Config("give --config or --mode (see --help)".into()));
    }
    let spec = resolve(assignments(args)?)?;
    eprintln!("cordp: {}", spec.describe());
    let rows = runner::run(&spec)?;
    let bytes = to_csv(&rows)?;
    match &spec.out {
        Some(p) => write_atomic(p, &bytes)?,
        None => io::stdout().lock().write_all(&bytes)?,
    }
    Ok(())
}

fn parse_users(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| CliError::Config(format!("--drop: bad user index `{x}`"))))
        .collect()
}

fn run_secagg(a: &SecaggArgs) -> CliResult<()> {
    let mut out = io::stdout().lock();
    if a.delayed {
        return write_delayed(&mut out, a.q, a.seed);
    }
    let inputs = a.inputs.clone().unwrap_or_else(|| (1..=a.n as u64).collect());
    if inputs.len() != a.n {
        return Err(CliError::Config(format!("{} inputs for n={}", inputs.len(), a.n)));
    }
    let waves = a.drops.iter().map(|s| parse_users(s)).collect::<CliResult<Vec<_>>>()?;
    let opts = SecAggOptions { q: a.q, t: a.t, blinding: !a.no_blinding, zero_blind: None };
    eprintln!("cordp secagg: n={} t={} q={} blinding={} drops={:?} seed={}", a.n, a.t, a.q, opts.blinding, waves, a.seed);
    write_transcript(&mut out, &inputs, &DropoutSchedule::new(waves), &opts, a.seed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Some(Command::Table3) => table3::report().map(|r| print!("{r}")),
        Some(Command::Secagg(a)) => run_secagg(a),
        None => run_experiment(&cli.run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cordp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
