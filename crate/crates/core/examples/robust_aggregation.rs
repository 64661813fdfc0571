//! Bad-PFL under each server-side aggregation rule. Half the clients
//! are selected per round so Multi-Krum has enough uploads.

use pflsim::attack::AttackMethod;
use pflsim::defense::AggregationRule;
use pflsim::experiment::{simulate, ExperimentConfig};
use pflsim::pfl::StrategyKind;

fn main() -> pflsim::Result<()> {
    let rounds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    println!("{:<10} {:>6} {:>8}", "rule", "acc", "asr");
    for rule in [AggregationRule::Fedavg, AggregationRule::Clipavg, AggregationRule::Multikrum, AggregationRule::Median, AggregationRule::Sign] {
        let mut config = ExperimentConfig::default();
        config.population.rounds = rounds;
        config.population.fraction = 0.5;
        config.strategy.kind = StrategyKind::Fedrep;
        config.attack.method = AttackMethod::Badpfl;
        config.defense.rule = rule;
        let out = simulate(&config)?;
        println!("{:<10} {:>6.1} {:>8.1}", rule.name(), out.summary.personal_acc, out.summary.personal_asr);
    }
    Ok(())
}
