//! Builds a federation from a config, runs it, and evaluates it.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{Adversary, AttackMethod, XiReference};
use crate::data::{dirichlet_partition, generate_shapeset, read_dataset, split_train_test, Dataset, PartitionPlan,
    ShapeSetSpec};
use crate::defense::{apply_posthoc, PostHoc};
use crate::error::{Error, Result};
use crate::fl::{ClientState, Federation, LocalRun, Role, RoundReport, ServerState};
use crate::nn::checkpoint::{self, TAG_CLASSIFIER, TAG_GENERATOR};
use crate::nn::{Network, NetworkSpec, ParamVector};
use crate::pfl::{merge_shared, StrategyKind};
use crate::rng::{derive_seed, stream, Purpose};

use super::config::{DatasetSource, ExperimentConfig};
use super::metrics::{evaluate_acc, evaluate_asr, write_metrics, MetricsRecord, Variant};

/// Loads or generates the dataset named by the config.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let d = &config.dataset;
    match &d.source {
        DatasetSource::ShapeSet => generate_shapeset(
            &ShapeSetSpec {
                classes: d.classes,
                per_class: d.per_class,
                channels: d.channels,
                height: d.size,
                width: d.size,
                noise: d.noise,
                contrast: d.contrast,
            },
            derive_seed(config.seed, Purpose::Dataset, 0, 0),
        ),
        DatasetSource::File(path) => {
            let data = read_dataset(path)?;
            let shape = data.image_shape();
            if data.classes != d.classes || shape != [d.channels, d.size, d.size] {
                return Err(Error::Config(vec![format!(
                    "dataset.path: file holds {} classes of {:?} images, config expects {} classes of {:?}",
                    data.classes,
                    shape,
                    d.classes,
                    [d.channels, d.size, d.size]
                )]));
            }
            Ok(data)
        }
    }
}

/// Partitions the data, picks the compromised clients and initialises
/// every model. Returns the partition for auditing.
pub fn build_federation(config: &ExperimentConfig) -> Result<(Federation, PartitionPlan)> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let seed = config.seed;
    let data = load_dataset(config)?;
    let p = &config.population;
    let plan = dirichlet_partition(&data.labels, p.clients, p.dirichlet_alpha, derive_seed(seed, Purpose::Partition, 0, 0))?;

    let mut pick = stream(seed, Purpose::Misc, 0, 0);
    let compromised = sample(&mut pick, p.clients, p.compromised).into_vec();
    let clients = plan
        .clients
        .iter()
        .enumerate()
        .map(|(id, idx)| {
            let (train, test) = split_train_test(idx, p.train_fraction, &mut stream(seed, Purpose::Split, id as u64, 0));
            let role = if compromised.contains(&id) { Role::Compromised } else { Role::Benign };
            ClientState { id, role, train, test, personal: None }
        })
        .collect::<Vec<_>>();

    let d = &config.dataset;
    let net = Network::new(NetworkSpec::desk_classifier(d.channels, d.size, d.classes))?;
    let global = net.init_params(&mut stream(seed, Purpose::Init, 0, 0));
    let adversary = Adversary::new(config.attack, data.image_shape(), &mut stream(seed, Purpose::Init, 1, 0))?;
    let shared = config.strategy.shared_set(&net)?;
    let mut probe: Vec<usize> = clients.iter().flat_map(|c| c.train.iter().copied()).collect();
    probe.sort_unstable();
    probe.truncate(256);

    let fed = Federation {
        net,
        data,
        clients,
        server: ServerState { global, round: 0, prev_delta: None },
        strategy: config.strategy,
        shared,
        defense: config.defense,
        adversary,
        local: config.local,
        fraction: p.fraction,
        seed,
        probe,
    };
    Ok((fed, plan))
}

impl Federation {
    /// The model a client would deploy right now.
    pub fn personalized(&self, id: usize) -> Result<ParamVector> {
        let global = &self.server.global;
        let personal = self.clients[id].personal.as_ref();
        match self.strategy.kind {
            StrategyKind::None => Ok(global.clone()),
            StrategyKind::Finetune | StrategyKind::Fedprox | StrategyKind::Ditto => {
                Ok(personal.unwrap_or(global).clone())
            }
            StrategyKind::Fedbn | StrategyKind::Fedrep => merge_shared(personal.unwrap_or(global), global, &self.shared),
        }
    }

    pub fn local_run(&self, id: usize) -> LocalRun<'_> {
        LocalRun {
            client: id,
            net: &self.net,
            data: &self.data,
            indices: &self.clients[id].train,
            lr: self.local.lr,
            batch_size: self.local.batch_size,
        }
    }

    /// Model the Bad-PFL disruptive noise is crafted against when measuring
    /// ASR of `victim`.
    fn xi_reference(&self, victim: &ParamVector) -> Result<ParamVector> {
        Ok(match self.adversary.config.xi_reference {
            XiReference::Global => self.server.global.clone(),
            XiReference::Victim => victim.clone(),
            XiReference::Adversary => match self.compromised().next() {
                Some(c) => self.personalized(c.id)?,
                None => self.server.global.clone(),
            },
        })
    }

    /// ASR of `model` on a client's test shard; `None` when undefined.
    pub fn attack_success(&self, model: &ParamVector, indices: &[usize]) -> Result<Option<f64>> {
        let reference = self.xi_reference(model)?;
        let trigger = self.adversary.trigger();
        let apply = |x: &crate::Tensor, y: &[usize]| trigger.apply(&self.net, &reference, x, y);
        match evaluate_asr(&self.net, model, &self.data, indices, &apply, self.adversary.config.target) {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedAsr) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Acc and ASR of one model on a client's test shard.
    pub fn evaluate_model(&self, id: usize, model: &ParamVector) -> Result<(f64, Option<f64>)> {
        let test = &self.clients[id].test;
        Ok((evaluate_acc(&self.net, model, &self.data, test)?, self.attack_success(model, test)?))
    }

    /// Global and personalized metrics for every client.
    pub fn evaluate(&self, wall_ms: u64) -> Result<Vec<MetricsRecord>> {
        let round = self.server.round;
        let rows: Vec<[MetricsRecord; 2]> = (0..self.clients.len())
            .into_par_iter()
            .map(|id| {
                let (ga, gs) = self.evaluate_model(id, &self.server.global)?;
                let (pa, ps) = self.evaluate_model(id, &self.personalized(id)?)?;
                let rec = |variant, acc_pct, asr_pct| MetricsRecord { round, client_id: id, variant, acc_pct, asr_pct, wall_ms };
                Ok([rec(Variant::Global, ga, gs), rec(Variant::Personalized, pa, ps)])
            })
            .collect::<Result<_>>()?;
        Ok(rows.into_iter().flatten().collect())
    }
}

/// Uniform means over benign clients at one evaluation round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub round: u64,
    pub global_acc: f64,
    pub global_asr: f64,
    pub personal_acc: f64,
    pub personal_asr: f64,
}

pub fn summarize(records: &[MetricsRecord], clients: &[ClientState], round: u64) -> Summary {
    let benign = |id: usize| clients[id].role == Role::Benign;
    let mean = |variant: Variant, asr: bool| {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.round == round && r.variant == variant && benign(r.client_id))
            .filter_map(|r| if asr { r.asr_pct } else { Some(r.acc_pct) })
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    Summary {
        round,
        global_acc: mean(Variant::Global, false),
        global_asr: mean(Variant::Global, true),
        personal_acc: mean(Variant::Personalized, false),
        personal_asr: mean(Variant::Personalized, true),
    }
}

/// Before/after metrics of a post-hoc defense on one benign client.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PostHocRecord {
    pub client_id: usize,
    pub defense: String,
    pub acc_before: f64,
    pub asr_before: Option<f64>,
    pub acc_after: f64,
    pub asr_after: Option<f64>,
}

fn posthoc_name(p: PostHoc) -> String {
    match p {
        PostHoc::None => "none".into(),
        PostHoc::Finetune(k) => format!("finetune-{k}"),
        PostHoc::SimpleTuning(k) => format!("simple-tuning-{k}"),
    }
}

/// Applies a post-hoc defense to every benign client's personalized model.
pub fn posthoc_eval(fed: &Federation, posthoc: PostHoc) -> Result<Vec<PostHocRecord>> {
    let ids: Vec<usize> = fed.clients.iter().filter(|c| c.role == Role::Benign).map(|c| c.id).collect();
    ids.into_par_iter()
        .map(|id| {
            let before = fed.personalized(id)?;
            let mut rng = stream(fed.seed, Purpose::PostHoc, id as u64, fed.server.round);
            let after = apply_posthoc(posthoc, &fed.local_run(id), &before, &mut rng)?;
            let (acc_before, asr_before) = fed.evaluate_model(id, &before)?;
            let (acc_after, asr_after) = fed.evaluate_model(id, &after)?;
            Ok(PostHocRecord { client_id: id, defense: posthoc_name(posthoc), acc_before, asr_before, acc_after, asr_after })
        })
        .collect()
}

/// Mean ASR before and after a post-hoc defense (clients with defined ASR).
pub fn posthoc_means(records: &[PostHocRecord]) -> (f64, f64) {
    let pairs: Vec<(f64, f64)> = records.iter().filter_map(|r| Some((r.asr_before?, r.asr_after?))).collect();
    let n = pairs.len().max(1) as f64;
    (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n)
}

/// Everything a run produced, kept in memory.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub records: Vec<MetricsRecord>,
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    pub posthoc: Vec<PostHocRecord>,
    pub federation: Federation,
    pub partition: PartitionPlan,
}

impl ExperimentOutcome {
    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_metrics(&mut buf, &self.records)?;
        Ok(buf)
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
    pool.install(f)
}

fn is_eval_round(config: &ExperimentConfig, done: u64) -> bool {
    let c = config.eval.cadence;
    done == config.population.rounds || (c > 0 && done % c == 0)
}

/// Runs the experiment in memory. `observe` sees every round report and,
/// on evaluation rounds, the benign-client summary.
pub fn simulate_with(
    config: &ExperimentConfig,
    observe: &mut (dyn FnMut(&RoundReport, Option<&Summary>, &Federation) + Send),
) -> Result<ExperimentOutcome> {
    with_threads(config.output.threads, || {
        let (mut fed, partition) = build_federation(config)?;
        let mut records = Vec::new();
        let mut reports = Vec::new();
        let mut summary = None;
        for _ in 0..config.population.rounds {
            let mut report = fed.run_round()?;
            if !config.output.wall_time {
                report.wall_ms = 0;
            }
            let done = fed.server.round;
            let mut current = None;
            if is_eval_round(config, done) {
                let rows = fed.evaluate(report.wall_ms)?;
                let s = summarize(&rows, &fed.clients, done);
                records.extend(rows);
                summary = Some(s);
                current = Some(s);
            }
            observe(&report, current.as_ref(), &fed);
            reports.push(report);
        }
        let posthoc = match config.defense.posthoc {
            PostHoc::None => Vec::new(),
            p => posthoc_eval(&fed, p)?,
        };
        Ok(ExperimentOutcome {
            config: config.clone(),
            records,
            reports,
            summary: summary.expect("the final round is always evaluated"),
            posthoc,
            federation: fed,
            partition,
        })
    })
}

pub fn simulate(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    simulate_with(config, &mut |_, _, _| {})
}

fn write_rounds(path: &Path, reports: &[RoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "selected", "rule", "aggregated", "global_loss", "wall_ms"])?;
    let ids = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    for r in reports {
        w.write_record([
            r.round.to_string(),
            ids(&r.selected),
            r.rule.clone(),
            ids(&r.aggregated),
            r.global_loss.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the experiment and writes its artifacts into `config.output.dir`:
/// `config.toml`, `partition.json`, `metrics.csv`, `rounds.csv`,
/// `summary.json`, `posthoc.csv` (when a post-hoc defense is set),
/// `global.ckpt`, `generator.ckpt` (Bad-PFL only) and periodic
/// `global-rNNNN.ckpt` checkpoints.
pub fn run_experiment(
    config: &ExperimentConfig,
    observe: &mut (dyn FnMut(&RoundReport, Option<&Summary>, &Federation) + Send),
) -> Result<ExperimentOutcome> {
    let dir = config.output.dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    let every = config.output.checkpoint_every;
    let mut ckpt_error = None;
    let outcome = simulate_with(config, &mut |report, summary, fed| {
        let done = report.round + 1;
        if every > 0 && done % every == 0 && ckpt_error.is_none() {
            let path = dir.join(format!("global-r{done:04}.ckpt"));
            if let Err(e) = checkpoint::save(path, TAG_CLASSIFIER, &fed.server.global) {
                ckpt_error = Some(e);
            }
        }
        observe(report, summary, fed);
    })?;
    if let Some(e) = ckpt_error {
        return Err(e);
    }
    outcome.partition.save(dir.join("partition.json"))?;
    fs::File::create(dir.join("metrics.csv"))?.write_all(&outcome.metrics_csv()?)?;
    write_rounds(&dir.join("rounds.csv"), &outcome.reports)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&outcome.summary)?)?;
    if !outcome.posthoc.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("posthoc.csv"))?;
        for r in &outcome.posthoc {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    let fed = &outcome.federation;
    checkpoint::save(dir.join("global.ckpt"), TAG_CLASSIFIER, &fed.server.global)?;
    if let (AttackMethod::Badpfl, Some(g)) = (fed.adversary.config.method, &fed.adversary.generator) {
        checkpoint::save(dir.join("generator.ckpt"), TAG_GENERATOR, &g.params)?;
    }
    Ok(outcome)
}
