//! Bad-PFL against a fixed patch under FedRep-style sharing, then both
//! after 45 steps of clean fine-tuning.
//!
//! ```text
//! cargo run --release --example badpfl_fedrep -- 2     # seed
//! ```

use pflsim::attack::AttackMethod;
use pflsim::defense::PostHoc;
use pflsim::experiment::{posthoc_means, simulate, ExperimentConfig};
use pflsim::pfl::StrategyKind;

fn main() -> pflsim::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    for method in [AttackMethod::Badpfl, AttackMethod::Patch] {
        let mut config = ExperimentConfig::default();
        config.seed = seed;
        config.strategy.kind = StrategyKind::Fedrep;
        config.attack.method = method;
        config.defense.posthoc = PostHoc::Finetune(45);
        let out = simulate(&config)?;
        let (before, after) = posthoc_means(&out.posthoc);
        println!(
            "{:<7} acc {:5.1}  personalized asr {:5.1}  global asr {:5.1}  after FT-45 {before:.1} -> {after:.1}",
            method.name(),
            out.summary.personal_acc,
            out.summary.personal_asr,
            out.summary.global_asr
        );
        if let Some(last) = out.federation.adversary.sessions.last() {
            println!("        last generator session (round {}): loss {:.3} -> {:.3}", last.round, last.losses[0], last.losses[last.losses.len() - 1]);
        }
    }
    Ok(())
}
