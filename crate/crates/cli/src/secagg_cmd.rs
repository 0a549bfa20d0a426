use std::io::Write;

use serde_json::json;

use cordp_core::rng::Seed;
use cordp_core::secagg_toy::{delayed_response_demo, secagg_run, FieldElement, Message, Outcome, Party};
pub use cordp_core::secagg_toy::{DropoutSchedule, SecAggOptions};

use crate::error::{CliError, CliResult};

fn party(p: Party) -> serde_json::Value {
    match p {
        Party::Server => json!("server"),
        Party::User(u) => json!(u),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn message_line(m: &Message) -> serde_json::Value {
    json!({
        "round": m.round,
        "sender": party(m.sender),
        "receiver": party(m.receiver),
        "kind": m.kind.as_str(),
        "bytes": hex(&m.bytes),
    })
}

fn outcome_json(o: &Outcome) -> serde_json::Value {
    match o {
        Outcome::Sum(v) => json!({ "sum": v.value() }),
        Outcome::Failure { round, live } => json!({ "failure": { "round": round, "live": live } }),
    }
}

/// Runs one aggregation and writes the transcript as JSON lines, ending
/// with a summary line.
pub fn write_transcript(
    out: &mut dyn Write,
    inputs: &[u64],
    schedule: &DropoutSchedule,
    opts: &SecAggOptions,
    seed: u64,
) -> CliResult<()> {
    let xs: Vec<FieldElement> = inputs
        .iter()
        .map(|&v| FieldElement::new(v, opts.q))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let tr = secagg_run(&xs, schedule, opts, &Seed::from_u64(seed)).map_err(|e| match e {
        cordp_core::Error::Config(_) | cordp_core::Error::Domain(_) | cordp_core::Error::FieldTooSmall { .. } => {
            CliError::Config(e.to_string())
        }
        e => CliError::Runtime(e),
    })?;
    for m in &tr.messages {
        writeln!(out, "{}", message_line(m))?;
    }
    let summary = json!({
        "outcome": outcome_json(&tr.outcome),
        "responders": tr.responders,
        "online_rounds": tr.online_rounds(),
        "online_bytes": tr.online_bytes(),
    });
    writeln!(out, "{summary}")?;
    Ok(())
}

/// The delayed-upload scenario with and without blinding, as one JSON line.
pub fn write_delayed(out: &mut dyn Write, q: u64, seed: u64) -> CliResult<()> {
    let r = delayed_response_demo(q, &Seed::from_u64(seed), false).map_err(|e| CliError::Config(e.to_string()))?;
    let line = json!({
        "planted_x2": r.planted_x2.value(),
        "unblinded_recovered": r.unblinded_recovered.value(),
        "blinded_residual": r.blinded_residual.value(),
        "b2": r.b2.value(),
        "unblinded_sum": outcome_json(&r.unblinded_sum),
        "blinded_sum": outcome_json(&r.blinded_sum),
    });
    writeln!(out, "{line}")?;
    Ok(())
}
