//! Config-driven experiments, metrics, and the diagnostic presets.

mod config;
mod diagnose;
mod metrics;
mod runner;

pub use config::{DatasetConfig, DatasetSource, EvalConfig, ExperimentConfig, OutputConfig, PopulationConfig, KEYS};
pub use metrics::{
    accuracy_pct, asr_pct, evaluate_acc, evaluate_asr, predict, read_metrics, write_metrics, MetricsRecord, Variant,
    METRICS_HEADER,
};
pub use runner::{
    build_federation, load_dataset, posthoc_eval, posthoc_means, run_experiment, simulate, simulate_with, summarize,
    ExperimentOutcome, PostHocRecord, Summary,
};
pub use diagnose::{
    finetune_private_on_triggers, run_diagnostic, DiagnosticReport, DiagnosticRow, DILUTION_COUNTS, PRESETS,
};
