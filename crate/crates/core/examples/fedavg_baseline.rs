//! Plain FedAvg on the desk pipeline with no attacker.

use pflsim::attack::AttackMethod;
use pflsim::experiment::{simulate_with, ExperimentConfig};
use pflsim::pfl::StrategyKind;

fn main() -> pflsim::Result<()> {
    let mut config = ExperimentConfig::default();
    config.strategy.kind = StrategyKind::None;
    config.attack.method = AttackMethod::None;
    config.population.compromised = 0;
    config.eval.cadence = 10;
    simulate_with(&config, &mut |report, summary, _| {
        if let Some(s) = summary {
            println!("round {:3}  train loss {:.3}  mean client acc {:.1}%", s.round, report.global_loss, s.personal_acc);
        }
    })?;
    Ok(())
}
