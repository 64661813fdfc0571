//! The three failure-mode presets: full-share-reg, partial-share-finetune
//! and dilution. Pass a preset name to run just one.

use pflsim::experiment::{run_diagnostic, ExperimentConfig, PRESETS};

fn main() -> pflsim::Result<()> {
    let wanted = std::env::args().nth(1);
    let base = ExperimentConfig::default();
    for preset in PRESETS.iter().filter(|p| wanted.as_deref().is_none_or(|w| w == **p)) {
        println!("{}", run_diagnostic(preset, &base)?);
    }
    Ok(())
}
