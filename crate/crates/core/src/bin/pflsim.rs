use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pflsim::experiment::{run_diagnostic, run_experiment, ExperimentConfig, PRESETS};
use pflsim::nn::checkpoint;
use pflsim::Error;

#[derive(Parser)]
#[command(name = "pflsim", version, about = "Personalized federated learning backdoor simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a diagnostic preset on the desk pipeline.
    Diagnose {
        #[arg(long, value_parser = PRESETS)]
        preset: String,
        /// Base config (defaults to the desk pipeline).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the layer table of a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownPreset(_) => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn execute(cli: Cli) -> pflsim::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            let outcome = run_experiment(&cfg, &mut |report, summary, _| {
                if let Some(s) = summary {
                    eprintln!(
                        "round {:5}  loss {:.4}  personalized acc {:6.2} asr {:6.2}  global acc {:6.2} asr {:6.2}",
                        s.round, report.global_loss, s.personal_acc, s.personal_asr, s.global_acc, s.global_asr
                    );
                }
            })?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
            println!("results written to {}", cfg.output.dir.display());
        }
        Command::Diagnose { preset, config, seed } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            print!("{}", run_diagnostic(&preset, &cfg)?);
        }
        Command::InspectCheckpoint { path } => {
            print!("{}", checkpoint::describe(&checkpoint::load(path)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
