//! Runs the desk pipeline with dotted-key overrides, e.g.
//!
//! ```text
//! cargo run --release --example desk_run -- strategy.kind=fedrep attack.method=badpfl
//! ```

use std::collections::BTreeMap;
use std::time::Instant;

use pflsim::experiment::{posthoc_means, simulate_with, ExperimentConfig};

fn main() -> pflsim::Result<()> {
    let mut overrides = BTreeMap::new();
    for arg in std::env::args().skip(1) {
        let Some((k, v)) = arg.split_once('=') else {
            eprintln!("expected key=value, got `{arg}`");
            std::process::exit(2);
        };
        let value: toml::Value = format!("v = {v}")
            .parse::<toml::Table>()
            .map(|mut t| t.remove("v").unwrap())
            .unwrap_or_else(|_| toml::Value::String(v.to_string()));
        overrides.insert(k.to_string(), value);
    }
    if !overrides.contains_key("eval.cadence") {
        overrides.insert("eval.cadence".into(), toml::Value::Integer(25));
    }
    let config = ExperimentConfig::from_flat(overrides)?;
    let start = Instant::now();
    let outcome = simulate_with(&config, &mut |report, summary, _| {
        if let Some(s) = summary {
            println!(
                "round {:4}  loss {:.3}  global acc {:5.1} asr {:5.1}  personal acc {:5.1} asr {:5.1}  [{:.1}s]",
                s.round,
                report.global_loss,
                s.global_acc,
                s.global_asr,
                s.personal_acc,
                s.personal_asr,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    for g in &outcome.federation.adversary.sessions {
        let first = g.losses.first().copied().unwrap_or(f64::NAN);
        let last = g.losses.last().copied().unwrap_or(f64::NAN);
        println!("generator round {:4} client {:2}: loss {first:.3} -> {last:.3}", g.round, g.client);
    }
    if !outcome.posthoc.is_empty() {
        let (before, after) = posthoc_means(&outcome.posthoc);
        println!("{}: personalized asr {before:.1} -> {after:.1}", outcome.posthoc[0].defense);
    }
    Ok(())
}
