//! Personalization strategies layered on top of the federated loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::{LocalRun, Objective, TrainOptions};
use crate::nn::{CoordMask, Network, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    None,
    Finetune,
    Fedprox,
    Ditto,
    Fedbn,
    Fedrep,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::None,
        StrategyKind::Finetune,
        StrategyKind::Fedprox,
        StrategyKind::Ditto,
        StrategyKind::Fedbn,
        StrategyKind::Fedrep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::Finetune => "finetune",
            StrategyKind::Fedprox => "fedprox",
            StrategyKind::Ditto => "ditto",
            StrategyKind::Fedbn => "fedbn",
            StrategyKind::Fedrep => "fedrep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Partial model-sharing strategies keep a private parameter subset.
    pub fn is_partial(self) -> bool {
        matches!(self, StrategyKind::Fedbn | StrategyKind::Fedrep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Proximal strength for fedprox and ditto.
    pub lambda: f32,
    /// Personalization steps for finetune and ditto.
    pub finetune_steps: usize,
    pub head_steps: usize,
    pub body_steps: usize,
}

impl Default for StrategySpec {
    fn default() -> Self {
        Self { kind: StrategyKind::None, lambda: 0.1, finetune_steps: 15, head_steps: 5, body_steps: 10 }
    }
}

impl StrategySpec {
    pub fn of(kind: StrategyKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// The coordinates shared with the server.
    pub fn shared_set(&self, net: &Network) -> Result<SharedIndexSet> {
        match self.kind {
            StrategyKind::Fedbn => Ok(SharedIndexSet::fedbn(net)),
            StrategyKind::Fedrep => SharedIndexSet::fedrep(net),
            _ => Ok(SharedIndexSet::all(net.layout().len())),
        }
    }
}

/// The index set Λ of coordinates kept equal between a client and the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedIndexSet(pub CoordMask);

impl SharedIndexSet {
    pub fn all(len: usize) -> Self {
        Self(CoordMask::all(len))
    }

    pub fn empty(len: usize) -> Self {
        Self(CoordMask::none(len))
    }

    /// Everything except batch-norm parameters and statistics.
    pub fn fedbn(net: &Network) -> Self {
        Self(net.layout().mask_where(|e| !e.kind.is_bn()))
    }

    /// The body (everything before the head split).
    pub fn fedrep(net: &Network) -> Result<Self> {
        Ok(Self(net.head_mask()?.not()))
    }

    pub fn mask(&self) -> &CoordMask {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.count() == 0
    }
}

/// Coordinates in Λ come from `global`, the rest from `personal`.
pub fn merge_shared(personal: &ParamVector, global: &ParamVector, shared: &SharedIndexSet) -> Result<ParamVector> {
    personal.check_layout(global)?;
    if shared.0.len() != personal.len() {
        return Err(Error::Layout(format!(
            "shared set covers {} coordinates, model has {}",
            shared.0.len(),
            personal.len()
        )));
    }
    let values = personal
        .values()
        .iter()
        .zip(global.values())
        .zip(&shared.0 .0)
        .map(|((&p, &g), &s)| if s { g } else { p })
        .collect();
    personal.with_values(values)
}

/// Proximal-gradient SGD on the local objective plus `(lambda / 2) |theta - global|^2`.
pub fn fedprox_local_update(
    run: &LocalRun<'_>,
    global: &ParamVector,
    lambda: f32,
    steps: usize,
    rng: &mut impl Rng,
    objective: &mut dyn Objective,
) -> Result<ParamVector> {
    let mut local = global.clone();
    run.train(&mut local, steps, rng, objective, TrainOptions { mask: None, prox: Some((global, lambda)) })?;
    Ok(local)
}

/// Trains the persistent personalized model toward `anchor` (the freshly
/// updated global copy) on clean local data.
pub fn ditto_update(
    run: &LocalRun<'_>,
    personal: &ParamVector,
    anchor: &ParamVector,
    lambda: f32,
    steps: usize,
    rng: &mut impl Rng,
    objective: &mut dyn Objective,
) -> Result<ParamVector> {
    let mut p = personal.clone();
    run.train(&mut p, steps, rng, objective, TrainOptions { mask: None, prox: Some((anchor, lambda)) })?;
    Ok(p)
}

/// Result of one FedRep-style round on a client.
#[derive(Debug, Clone)]
pub struct FedRepOutcome {
    /// New body, with head coordinates reset to the server's values.
    pub upload: ParamVector,
    /// The full local model after both phases (private head included).
    pub local: ParamVector,
}

/// Head-only phase, then body-only phase. `extra_mask` further restricts
/// which coordinates may move (used by masked attacks).
#[allow(clippy::too_many_arguments)]
pub fn fedrep_local_train(
    run: &LocalRun<'_>,
    personal: &ParamVector,
    global: &ParamVector,
    head_steps: usize,
    body_steps: usize,
    rng: &mut impl Rng,
    objective: &mut dyn Objective,
    extra_mask: Option<&CoordMask>,
) -> Result<FedRepOutcome> {
    let body = SharedIndexSet::fedrep(run.net)?;
    let head = body.0.not();
    let mut local = merge_shared(personal, global, &body)?;
    let restrict = |m: &CoordMask| match extra_mask {
        Some(e) => m.and(e),
        None => m.clone(),
    };
    let head_mask = restrict(&head);
    let body_mask = restrict(&body.0);
    run.train(&mut local, head_steps, rng, objective, TrainOptions { mask: Some(&head_mask), prox: None })?;
    run.train(&mut local, body_steps, rng, objective, TrainOptions { mask: Some(&body_mask), prox: None })?;
    let upload = merge_shared(global, &local, &body)?;
    Ok(FedRepOutcome { upload, local })
}

/// Plain SGD on local data.
pub fn finetune(
    run: &LocalRun<'_>,
    params: &ParamVector,
    steps: usize,
    rng: &mut impl Rng,
    objective: &mut dyn Objective,
) -> Result<ParamVector> {
    let mut p = params.clone();
    run.train(&mut p, steps, rng, objective, TrainOptions::default())?;
    Ok(p)
}
