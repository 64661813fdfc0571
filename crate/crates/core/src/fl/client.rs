//! One client's work in a round, dispatched on the personalization strategy.

use crate::data::Dataset;
use crate::error::Result;
use crate::nn::{CoordMask, Network, ParamVector};
use crate::pfl::{ditto_update, fedrep_local_train, finetune, merge_shared, SharedIndexSet, StrategyKind, StrategySpec};
use crate::rng::{stream, Purpose};

use super::{ClientState, CleanObjective, LocalConfig, LocalRun, Objective, TrainOptions};

/// Read-only view of the round shared by every client task.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub net: &'a Network,
    pub data: &'a Dataset,
    pub global: &'a ParamVector,
    pub strategy: &'a StrategySpec,
    pub shared: &'a SharedIndexSet,
    pub local: LocalConfig,
    pub round: u64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub upload: ParamVector,
    pub personal: ParamVector,
    pub losses: Vec<f64>,
}

impl<'a> RoundContext<'a> {
    pub fn run(&self, client: &'a ClientState) -> LocalRun<'a> {
        LocalRun {
            client: client.id,
            net: self.net,
            data: self.data,
            indices: &client.train,
            lr: self.local.lr,
            batch_size: self.local.batch_size,
        }
    }

    /// The model a client starts local training from.
    pub fn working_model(&self, client: &ClientState) -> Result<ParamVector> {
        match (self.strategy.kind.is_partial(), &client.personal) {
            (true, Some(p)) => merge_shared(p, self.global, self.shared),
            _ => Ok(self.global.clone()),
        }
    }
}

/// Local training plus personalization. `malicious` clients skip the
/// FedProx term; `mask` restricts which coordinates local training may move.
pub fn client_update(
    ctx: &RoundContext<'_>,
    client: &ClientState,
    objective: &mut dyn Objective,
    mask: Option<&CoordMask>,
    malicious: bool,
) -> Result<ClientUpdate> {
    let run = ctx.run(client);
    let mut rng = stream(ctx.seed, Purpose::LocalTrain, client.id as u64, ctx.round);
    let mut prng = stream(ctx.seed, Purpose::Personalize, client.id as u64, ctx.round);
    let s = ctx.strategy;
    let steps = ctx.local.steps;
    let plain = TrainOptions { mask, prox: None };

    match s.kind {
        StrategyKind::None | StrategyKind::Finetune | StrategyKind::Fedprox | StrategyKind::Ditto => {
            let mut local = ctx.global.clone();
            let opts = match s.kind {
                StrategyKind::Fedprox if !malicious => TrainOptions { mask, prox: Some((ctx.global, s.lambda)) },
                _ => plain,
            };
            let losses = run.train(&mut local, steps, &mut rng, objective, opts)?;
            let personal = match s.kind {
                StrategyKind::Finetune => finetune(&run, &local, s.finetune_steps, &mut prng, &mut CleanObjective)?,
                StrategyKind::Ditto => {
                    let start = client.personal.as_ref().unwrap_or(ctx.global);
                    ditto_update(&run, start, &local, s.lambda, s.finetune_steps, &mut prng, &mut CleanObjective)?
                }
                _ => local.clone(),
            };
            Ok(ClientUpdate { upload: local, personal, losses })
        }
        StrategyKind::Fedbn => {
            let mut local = ctx.working_model(client)?;
            let losses = run.train(&mut local, steps, &mut rng, objective, plain)?;
            let upload = merge_shared(ctx.global, &local, ctx.shared)?;
            Ok(ClientUpdate { upload, personal: local, losses })
        }
        StrategyKind::Fedrep => {
            let personal = client.personal.as_ref().unwrap_or(ctx.global);
            let out = fedrep_local_train(&run, personal, ctx.global, s.head_steps, s.body_steps, &mut rng, objective, mask)?;
            Ok(ClientUpdate { upload: out.upload, personal: out.local, losses: Vec::new() })
        }
    }
}
