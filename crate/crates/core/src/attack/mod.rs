//! Bad-PFL and the baseline backdoor attacks.

mod baselines;
mod generator;
mod trigger;

pub use baselines::{modrep_amplify, neurotoxin_mask, pgd_project_upload};
pub use generator::{generator_loss, train_generator, GeneratorParams, GeneratorTraining};
pub use trigger::{
    apply_trigger, compose_trigger, craft_disruptive_noise, craft_target_feature, BadPflTrigger, IdentityTrigger,
    PatchTrigger, Trigger, TriggeredBatch,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatchSpec};
use crate::error::{Error, Result};
use crate::fl::{Objective, StepOutcome};
use crate::nn::{CoordMask, Mode, Network, NetworkSpec, ParamVector};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    None,
    Badpfl,
    Patch,
    Modrep,
    Neurotoxin,
    Pgdbkd,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 6] = [
        AttackMethod::None,
        AttackMethod::Badpfl,
        AttackMethod::Patch,
        AttackMethod::Modrep,
        AttackMethod::Neurotoxin,
        AttackMethod::Pgdbkd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::None => "none",
            AttackMethod::Badpfl => "badpfl",
            AttackMethod::Patch => "patch",
            AttackMethod::Modrep => "modrep",
            AttackMethod::Neurotoxin => "neurotoxin",
            AttackMethod::Pgdbkd => "pgdbkd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Every baseline poisons with the fixed patch.
    pub fn uses_patch(self) -> bool {
        !matches!(self, AttackMethod::Badpfl)
    }
}

/// Which classifier the disruptive noise is crafted against when
/// measuring ASR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XiReference {
    /// The current global model.
    Global,
    /// The first compromised client's own personalized model.
    Adversary,
    /// The model under test.
    Victim,
}

impl XiReference {
    pub const ALL: [XiReference; 3] = [XiReference::Global, XiReference::Adversary, XiReference::Victim];

    pub fn name(self) -> &'static str {
        match self {
            XiReference::Global => "global",
            XiReference::Adversary => "adversary",
            XiReference::Victim => "victim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub target: usize,
    /// Poisoning rate.
    pub alpha: f32,
    pub epsilon: f32,
    pub sigma: f32,
    pub generator_steps: usize,
    pub generator_lr: f32,
    pub generator_batch: usize,
    pub generator_width: usize,
    pub generator_depth: usize,
    pub modrep_gamma: f32,
    pub pgd_rho: f32,
    pub neurotoxin_ratio: f32,
    pub patch: PatchSpec,
    pub use_delta: bool,
    pub use_xi: bool,
    pub xi_reference: XiReference,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::None,
            target: 0,
            alpha: 0.2,
            epsilon: 4.0 / 255.0,
            sigma: 4.0 / 255.0,
            generator_steps: 30,
            generator_lr: 0.01,
            generator_batch: 32,
            generator_width: 8,
            generator_depth: 2,
            modrep_gamma: 10.0,
            pgd_rho: 1.0,
            neurotoxin_ratio: 0.1,
            patch: PatchSpec { top: 0, left: 0, height: 3, width: 3, value: 1.0 },
            use_delta: true,
            use_xi: true,
            xi_reference: XiReference::Adversary,
        }
    }
}

impl AttackConfig {
    /// All problems with the configuration, keyed by field name.
    pub fn problems(&self, classes: usize, height: usize, width: usize) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |k: &str, m: String| out.push((k.to_string(), m));
        if self.target >= classes {
            bad("target", format!("target label {} is not below the class count {classes}", self.target));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            bad("alpha", format!("poisoning rate must be in [0, 1], got {}", self.alpha));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            bad("epsilon", format!("must be a finite value >= 0, got {}", self.epsilon));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            bad("sigma", format!("must be a finite value >= 0, got {}", self.sigma));
        }
        if !(self.generator_lr > 0.0) {
            bad("generator_lr", format!("must be > 0, got {}", self.generator_lr));
        }
        if self.generator_batch == 0 {
            bad("generator_batch", "must be >= 1".into());
        }
        if self.generator_width == 0 {
            bad("generator_width", "must be >= 1".into());
        }
        if self.generator_depth == 0 || height % (1 << self.generator_depth) != 0 || width % (1 << self.generator_depth) != 0 {
            bad(
                "generator_depth",
                format!("{height}x{width} images are not divisible by 2^{}", self.generator_depth),
            );
        }
        if !(self.neurotoxin_ratio > 0.0 && self.neurotoxin_ratio <= 1.0) {
            bad("neurotoxin_ratio", format!("must be in (0, 1], got {}", self.neurotoxin_ratio));
        }
        if !(self.pgd_rho >= 0.0) {
            bad("pgd_rho", format!("must be >= 0, got {}", self.pgd_rho));
        }
        if !self.modrep_gamma.is_finite() {
            bad("modrep_gamma", "must be finite".into());
        }
        if let Err(e) = self.patch.check(height, width) {
            bad("patch", e.to_string());
        }
        if !(0.0..=1.0).contains(&self.patch.value) {
            bad("patch.value", format!("must be in [0, 1], got {}", self.patch.value));
        }
        out
    }

    pub fn generator_training(&self) -> GeneratorTraining {
        GeneratorTraining {
            target: self.target,
            epsilon: self.epsilon,
            sigma: self.sigma,
            steps: self.generator_steps,
            batch_size: self.generator_batch,
            use_xi: self.use_xi,
        }
    }
}

/// The poisoned objective `(1 - alpha) CE(clean) + alpha CE(T(x) -> y_t)`.
/// BN statistics are taken from the clean pass only.
pub struct PoisonedObjective<'a> {
    pub trigger: &'a dyn Trigger,
    pub alpha: f32,
    pub target: usize,
}

impl Objective for PoisonedObjective<'_> {
    fn evaluate(&mut self, net: &Network, params: &ParamVector, x: &Tensor, y: &[usize]) -> Result<StepOutcome> {
        let clean = net.backward(params, x, y, Mode::Train, false)?;
        if self.alpha == 0.0 {
            return Ok(StepOutcome { loss: clean.loss, grads: clean.param_grads, running: clean.running });
        }
        let xt = self.trigger.apply(net, params, x, y)?;
        let bad = net.backward(params, &xt, &vec![self.target; x.batch()], Mode::Train, false)?;
        let a = self.alpha;
        let values = clean
            .param_grads
            .values()
            .iter()
            .zip(bad.param_grads.values())
            .map(|(&c, &b)| (1.0 - a) * c + a * b)
            .collect();
        Ok(StepOutcome {
            loss: (1.0 - a as f64) * clean.loss + a as f64 * bad.loss,
            grads: clean.param_grads.with_values(values)?,
            running: clean.running,
        })
    }
}

/// One generator training session, logged by the adversary.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSession {
    pub round: u64,
    pub client: usize,
    pub losses: Vec<f64>,
}

/// Shared state of all compromised clients.
#[derive(Debug, Clone)]
pub struct Adversary {
    pub config: AttackConfig,
    pub generator: Option<GeneratorParams>,
    pub sessions: Vec<GeneratorSession>,
}

impl Adversary {
    pub fn new(config: AttackConfig, image_shape: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let generator = if config.method == AttackMethod::Badpfl && config.use_delta {
            if image_shape.len() != 3 || image_shape[1] != image_shape[2] {
                return Err(Error::shape(format!("generator needs square C x H x W inputs, got {image_shape:?}")));
            }
            let spec = NetworkSpec::generator(image_shape[0], image_shape[1], config.generator_width, config.generator_depth);
            Some(GeneratorParams::new(spec, config.generator_lr, rng)?)
        } else {
            None
        };
        Ok(Self { config, generator, sessions: Vec::new() })
    }

    pub fn is_active(&self) -> bool {
        self.config.method != AttackMethod::None
    }

    /// Trains the generator on a compromised client's shard against its
    /// working model. Only Bad-PFL does anything here.
    pub fn prepare(
        &mut self,
        net: &Network,
        working: &ParamVector,
        data: &Dataset,
        indices: &[usize],
        round: u64,
        client: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if self.config.method != AttackMethod::Badpfl {
            return Ok(());
        }
        let cfg = self.config.generator_training();
        if let Some(gen) = self.generator.as_mut() {
            let losses = train_generator(gen, net, working, data, indices, &cfg, rng)?;
            self.sessions.push(GeneratorSession { round, client, losses });
        }
        Ok(())
    }

    /// The trigger used for poisoning and for measuring ASR.
    pub fn trigger(&self) -> Box<dyn Trigger + '_> {
        let c = &self.config;
        match (c.method, &self.generator) {
            (AttackMethod::Badpfl, Some(g)) => Box::new(BadPflTrigger {
                gen_net: &g.net,
                gen: &g.params,
                epsilon: c.epsilon,
                sigma: c.sigma,
                use_delta: c.use_delta,
                use_xi: c.use_xi,
            }),
            (AttackMethod::Badpfl, None) => Box::new(XiOnly { sigma: if c.use_xi { c.sigma } else { 0.0 } }),
            _ => Box::new(PatchTrigger(c.patch)),
        }
    }

    /// Coordinates a compromised client may change this round.
    pub fn train_mask(&self, prev_delta: Option<&[f32]>, len: usize) -> Result<Option<CoordMask>> {
        if self.config.method == AttackMethod::Neurotoxin {
            neurotoxin_mask(prev_delta, len, self.config.neurotoxin_ratio).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Post-training manipulation of the upload.
    pub fn transform_upload(&self, upload: ParamVector, global: &ParamVector) -> Result<ParamVector> {
        match self.config.method {
            AttackMethod::Modrep => modrep_amplify(&upload, global, self.config.modrep_gamma),
            AttackMethod::Pgdbkd => pgd_project_upload(&upload, global, self.config.pgd_rho),
            _ => Ok(upload),
        }
    }
}

/// Bad-PFL with the target feature ablated.
#[derive(Debug, Clone, Copy)]
struct XiOnly {
    sigma: f32,
}

impl Trigger for XiOnly {
    fn apply(&self, net: &Network, model: &ParamVector, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        x.add(&craft_disruptive_noise(net, model, x, y, self.sigma)?).map(|t| t.clamp(0.0, 1.0))
    }
}
