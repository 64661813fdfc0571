//! Trains a few rounds, writes the global model and generator to disk and
//! reads them back.

use pflsim::attack::AttackMethod;
use pflsim::experiment::{simulate, ExperimentConfig};
use pflsim::nn::checkpoint;

fn main() -> pflsim::Result<()> {
    let mut config = ExperimentConfig::default();
    config.population.rounds = 5;
    config.attack.method = AttackMethod::Badpfl;
    let out = simulate(&config)?;
    let dir = std::env::temp_dir().join("pflsim-checkpoint-demo");
    std::fs::create_dir_all(&dir)?;

    let path = dir.join("global.ckpt");
    checkpoint::save(&path, checkpoint::TAG_CLASSIFIER, &out.federation.server.global)?;
    let back = checkpoint::load(&path)?;
    assert_eq!(back.params, out.federation.server.global);
    println!("{}", checkpoint::describe(&back));

    if let Some(gen) = &out.federation.adversary.generator {
        let path = dir.join("generator.ckpt");
        checkpoint::save(&path, checkpoint::TAG_GENERATOR, &gen.params)?;
        println!("{}", checkpoint::describe(&checkpoint::load(&path)?));
    }
    Ok(())
}
