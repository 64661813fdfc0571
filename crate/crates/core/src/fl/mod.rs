//! The federated training loop.

mod client;
mod train;

pub use client::{client_update, ClientUpdate, RoundContext};
pub use train::{prox_penalty, prox_step, BatchSampler, CleanObjective, LocalRun, Objective, StepOutcome, TrainOptions};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{Adversary, PoisonedObjective};
use crate::data::Dataset;
use crate::defense::{fedavg, DefenseSpec};
use crate::error::{Error, Result};
use crate::nn::{Network, ParamVector};
use crate::pfl::{SharedIndexSet, StrategySpec};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Benign,
    Compromised,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Strategy-specific private model; `None` until first selected.
    /// Local SGD is stateless, so no optimizer state is kept.
    pub personal: Option<ParamVector>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ParamVector,
    pub round: u64,
    /// `global(t) - global(t - 1)` after the latest aggregation.
    pub prev_delta: Option<Vec<f32>>,
}

/// Local SGD hyperparameters shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { steps: 15, lr: 0.1, batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u64,
    pub selected: Vec<usize>,
    pub rule: String,
    /// Clients whose uploads entered the aggregate.
    pub aggregated: Vec<usize>,
    pub global_loss: f64,
    pub wall_ms: u64,
}

/// Number of clients picked per round.
pub fn selection_size(m: usize, fraction: f64) -> usize {
    ((fraction * m as f64 - 1e-9).ceil() as usize).clamp(1, m)
}

/// Uniform sample without replacement of `ceil(fraction * m)` ids, sorted.
pub fn select_clients(seed: u64, round: u64, m: usize, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("selection fraction must be in (0, 1], got {fraction}")));
    }
    if m == 0 {
        return Err(Error::invalid("no clients to select from"));
    }
    let mut rng = stream(seed, Purpose::Selection, 0, round);
    let mut ids = sample(&mut rng, m, selection_size(m, fraction)).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Trains a copy of `global` on a benign client's data.
pub fn benign_local_update(run: &LocalRun<'_>, global: &ParamVector, steps: usize, rng: &mut impl rand::Rng) -> Result<ParamVector> {
    let mut local = global.clone();
    run.train(&mut local, steps, rng, &mut CleanObjective, TrainOptions::default())?;
    Ok(local)
}

/// Uniform coordinate-wise mean of the uploads.
pub fn fedavg_aggregate(uploads: &[ParamVector]) -> Result<ParamVector> {
    fedavg(uploads)
}

/// A whole simulated federation.
#[derive(Debug, Clone)]
pub struct Federation {
    pub net: Network,
    pub data: Dataset,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub strategy: StrategySpec,
    pub shared: SharedIndexSet,
    pub defense: DefenseSpec,
    pub adversary: Adversary,
    pub local: LocalConfig,
    pub fraction: f64,
    pub seed: u64,
    /// Training samples used for the global loss snapshot.
    pub probe: Vec<usize>,
}

impl Federation {
    fn context(&self) -> RoundContext<'_> {
        RoundContext {
            net: &self.net,
            data: &self.data,
            global: &self.server.global,
            strategy: &self.strategy,
            shared: &self.shared,
            local: self.local,
            round: self.server.round,
            seed: self.seed,
        }
    }

    pub fn compromised(&self) -> impl Iterator<Item = &ClientState> {
        self.clients.iter().filter(|c| c.role == Role::Compromised)
    }

    /// One round: selection, local updates, aggregation.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let start = Instant::now();
        let round = self.server.round;
        let selected = select_clients(self.seed, round, self.clients.len(), self.fraction)?;
        let attacking = self.adversary.is_active();
        let (bad, good): (Vec<usize>, Vec<usize>) =
            selected.iter().partition(|&&id| attacking && self.clients[id].role == Role::Compromised);

        let mut results: BTreeMap<usize, ClientUpdate> = {
            let ctx = self.context();
            good.par_iter()
                .map(|&id| Ok((id, client_update(&ctx, &self.clients[id], &mut CleanObjective, None, false)?)))
                .collect::<Result<_>>()?
        };

        for id in bad {
            let ctx = RoundContext {
                net: &self.net,
                data: &self.data,
                global: &self.server.global,
                strategy: &self.strategy,
                shared: &self.shared,
                local: self.local,
                round,
                seed: self.seed,
            };
            let client = &self.clients[id];
            let working = ctx.working_model(client)?;
            let mut rng = stream(self.seed, Purpose::Generator, id as u64, round);
            self.adversary.prepare(&self.net, &working, &self.data, &client.train, round, id, &mut rng)?;
            let adv = &self.adversary;
            let mask = adv.train_mask(self.server.prev_delta.as_deref(), self.server.global.len())?;
            let trigger = adv.trigger();
            let mut objective =
                PoisonedObjective { trigger: trigger.as_ref(), alpha: adv.config.alpha, target: adv.config.target };
            let mut update = client_update(&ctx, client, &mut objective, mask.as_ref(), true)?;
            update.upload = adv.transform_upload(update.upload, &self.server.global)?;
            results.insert(id, update);
        }

        let ids: Vec<usize> = results.keys().copied().collect();
        let uploads: Vec<ParamVector> = results.values().map(|u| u.upload.clone()).collect();
        let agg = self.defense.aggregate(&self.server.global, &uploads)?;
        if !agg.params.all_finite() {
            return Err(Error::NonFinite(format!("aggregated global model in round {round}")));
        }
        self.server.prev_delta = Some(agg.params.delta(&self.server.global)?);
        self.server.global = agg.params;
        self.server.round += 1;
        for (id, u) in results {
            self.clients[id].personal = Some(u.personal);
        }

        let global_loss = if self.probe.is_empty() {
            0.0
        } else {
            LocalRun { client: 0, net: &self.net, data: &self.data, indices: &self.probe, lr: 0.0, batch_size: 1 }
                .eval_loss(&self.server.global)?
        };
        Ok(RoundReport {
            round,
            selected,
            rule: self.defense.rule.name().to_string(),
            aggregated: agg.selected.iter().map(|&i| ids[i]).collect(),
            global_loss,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }
}
