//! Diagnostic presets probing why conventional backdoors fail in PFL.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{AttackMethod, PatchTrigger, PoisonedObjective};
use crate::error::{Error, Result};
use crate::fl::{Federation, Role, TrainOptions};
use crate::pfl::StrategyKind;
use crate::rng::{stream, Purpose};

use super::config::ExperimentConfig;
use super::runner::{simulate, Summary};

pub const PRESETS: [&str; 3] = ["full-share-reg", "partial-share-finetune", "dilution"];

/// Compromised-client counts swept by the dilution preset.
pub const DILUTION_COUNTS: [usize; 4] = [10, 5, 2, 1];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub label: String,
    pub personal_acc: f64,
    pub personal_asr: f64,
    pub global_asr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticReport {
    pub preset: String,
    pub rows: Vec<DiagnosticRow>,
}

impl DiagnosticReport {
    pub fn row(&self, label: &str) -> Option<&DiagnosticRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

impl fmt::Display for DiagnosticReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "preset {}", self.preset)?;
        writeln!(f, "{:<36} {:>8} {:>8} {:>8}", "configuration", "acc", "asr", "g-asr")?;
        for r in &self.rows {
            writeln!(f, "{:<36} {:>8.2} {:>8.2} {:>8.2}", r.label, r.personal_acc, r.personal_asr, r.global_asr)?;
        }
        Ok(())
    }
}

fn row(label: impl Into<String>, s: &Summary) -> DiagnosticRow {
    DiagnosticRow { label: label.into(), personal_acc: s.personal_acc, personal_asr: s.personal_asr, global_asr: s.global_asr }
}

/// Runs a named preset on top of `base` (dataset, population, seed and
/// local training come from `base`; the preset fixes strategy and attack).
pub fn run_diagnostic(preset: &str, base: &ExperimentConfig) -> Result<DiagnosticReport> {
    let mut base = base.clone();
    base.eval.cadence = 0;
    base.defense.posthoc = crate::defense::PostHoc::None;
    if base.attack.method == AttackMethod::None || base.attack.method == AttackMethod::Badpfl {
        base.attack.method = AttackMethod::Patch;
    }
    let rows = match preset {
        "full-share-reg" => full_share_reg(&base)?,
        "partial-share-finetune" => partial_share_finetune(&base)?,
        "dilution" => dilution(&base)?,
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(DiagnosticReport { preset: preset.to_string(), rows })
}

fn full_share_reg(base: &ExperimentConfig) -> Result<Vec<DiagnosticRow>> {
    let mut rows = Vec::new();
    for lambda in [base.strategy.lambda.max(f32::MIN_POSITIVE), 0.0] {
        let mut c = base.clone();
        c.strategy.kind = StrategyKind::Ditto;
        c.strategy.lambda = lambda;
        let out = simulate(&c)?;
        rows.push(row(format!("ditto lambda={lambda}"), &out.summary));
    }
    Ok(rows)
}

/// Freezes the shared coordinates of every benign client's personalized
/// model and trains the private ones on a mix of clean and triggered data.
/// Returns (mean acc, mean ASR) over benign clients.
pub fn finetune_private_on_triggers(fed: &Federation, steps: usize, alpha: f32) -> Result<(f64, f64)> {
    let private = fed.shared.mask().not();
    let trigger = PatchTrigger(fed.adversary.config.patch);
    let target = fed.adversary.config.target;
    let ids: Vec<usize> = fed.clients.iter().filter(|c| c.role == Role::Benign).map(|c| c.id).collect();
    let results: Vec<(f64, Option<f64>)> = ids
        .into_par_iter()
        .map(|id| {
            let mut model = fed.personalized(id)?;
            let mut rng = stream(fed.seed, Purpose::PostHoc, id as u64, u64::MAX);
            let mut objective = PoisonedObjective { trigger: &trigger, alpha, target };
            fed.local_run(id).train(&mut model, steps, &mut rng, &mut objective, TrainOptions {
                mask: Some(&private),
                prox: None,
            })?;
            let test = &fed.clients[id].test;
            let acc = super::metrics::evaluate_acc(&fed.net, &model, &fed.data, test)?;
            let apply = |x: &crate::Tensor, y: &[usize]| crate::attack::Trigger::apply(&trigger, &fed.net, &model, x, y);
            let asr = match super::metrics::evaluate_asr(&fed.net, &model, &fed.data, test, &apply, target) {
                Ok(v) => Some(v),
                Err(Error::UndefinedAsr) => None,
                Err(e) => return Err(e),
            };
            Ok((acc, asr))
        })
        .collect::<Result<_>>()?;
    let acc = results.iter().map(|r| r.0).sum::<f64>() / results.len().max(1) as f64;
    let asrs: Vec<f64> = results.iter().filter_map(|r| r.1).collect();
    Ok((acc, asrs.iter().sum::<f64>() / asrs.len().max(1) as f64))
}

fn partial_share_finetune(base: &ExperimentConfig) -> Result<Vec<DiagnosticRow>> {
    let steps = base.local.steps;
    // the triggered share of the fine-tuning mix is the attack's poisoning rate
    let alpha = base.attack.alpha;
    let mut rows = Vec::new();
    for kind in [StrategyKind::Fedbn, StrategyKind::Fedrep] {
        let mut attacked = base.clone();
        attacked.strategy.kind = kind;
        let out = simulate(&attacked)?;
        rows.push(row(format!("{} config-1 attack", kind.name()), &out.summary));
        let (acc, asr) = finetune_private_on_triggers(&out.federation, steps, alpha)?;
        rows.push(DiagnosticRow {
            label: format!("{} config-2 attack+finetune", kind.name()),
            personal_acc: acc,
            personal_asr: asr,
            global_asr: out.summary.global_asr,
        });
        let mut clean = attacked.clone();
        clean.attack.method = AttackMethod::None;
        let out = simulate(&clean)?;
        let (acc, asr) = finetune_private_on_triggers(&out.federation, steps, alpha)?;
        rows.push(DiagnosticRow {
            label: format!("{} config-3 clean+finetune", kind.name()),
            personal_acc: acc,
            personal_asr: asr,
            global_asr: out.summary.global_asr,
        });
    }
    Ok(rows)
}

fn dilution(base: &ExperimentConfig) -> Result<Vec<DiagnosticRow>> {
    let mut rows = Vec::new();
    for n in DILUTION_COUNTS.into_iter().filter(|&n| n <= base.population.clients) {
        let mut c = base.clone();
        c.population.compromised = n;
        let out = simulate(&c)?;
        rows.push(row(format!("compromised={n}"), &out.summary));
    }
    Ok(rows)
}
