//! Mini-batch SGD on a client's local data.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{CoordMask, Mode, Network, OptimizerState, ParamVector, RunningStats};
use crate::tensor::Tensor;

/// Loss and gradient of one training step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub grads: ParamVector,
    pub running: RunningStats,
}

/// The per-step training objective of a client.
pub trait Objective {
    fn evaluate(&mut self, net: &Network, params: &ParamVector, x: &Tensor, y: &[usize]) -> Result<StepOutcome>;
}

/// Plain mean cross-entropy (the benign objective).
#[derive(Debug, Clone, Copy, Default)]
pub struct CleanObjective;

impl Objective for CleanObjective {
    fn evaluate(&mut self, net: &Network, params: &ParamVector, x: &Tensor, y: &[usize]) -> Result<StepOutcome> {
        let g = net.backward(params, x, y, Mode::Train, false)?;
        Ok(StepOutcome { loss: g.loss, grads: g.param_grads, running: g.running })
    }
}

/// Epoch-style sampler: reshuffles the index pool whenever it runs out.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(indices: &[usize], batch: usize) -> Self {
        Self { pool: indices.to_vec(), pos: indices.len(), batch: batch.max(1) }
    }

    pub fn next_batch(&mut self, rng: &mut impl Rng) -> Vec<usize> {
        let take = self.batch.min(self.pool.len());
        if self.pos + take > self.pool.len() {
            self.pool.shuffle(rng);
            self.pos = 0;
        }
        let out = self.pool[self.pos..self.pos + take].to_vec();
        self.pos += take;
        out
    }
}

/// Extra constraints on a training run.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Only these coordinates (including BN running statistics) may change.
    pub mask: Option<&'a CoordMask>,
    /// Proximal anchor and strength for `(lambda / 2) * |theta - anchor|^2`.
    pub prox: Option<(&'a ParamVector, f32)>,
}

/// A client's local data plus SGD hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct LocalRun<'a> {
    pub client: usize,
    pub net: &'a Network,
    pub data: &'a Dataset,
    pub indices: &'a [usize],
    pub lr: f32,
    pub batch_size: usize,
}

impl<'a> LocalRun<'a> {
    /// Runs `steps` SGD steps in place and returns the per-step losses.
    pub fn train(
        &self,
        params: &mut ParamVector,
        steps: usize,
        rng: &mut impl Rng,
        objective: &mut dyn Objective,
        opts: TrainOptions<'_>,
    ) -> Result<Vec<f64>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        if self.indices.is_empty() {
            return Err(Error::EmptyData(self.client));
        }
        let mut sampler = BatchSampler::new(self.indices, self.batch_size);
        let mut opt = OptimizerState::sgd(self.lr);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx = sampler.next_batch(rng);
            let (x, y) = self.data.batch(&idx);
            let out = objective.evaluate(self.net, params, &x, &y)?;
            let mut loss = out.loss;
            if let Some((anchor, lambda)) = opts.prox {
                loss += prox_penalty(params, anchor, lambda)?;
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite("local training loss".into()));
            }
            opt.step(params, &out.grads, opts.mask)?;
            if let Some((anchor, lambda)) = opts.prox {
                prox_step(params, anchor, lambda, self.lr, opts.mask)?;
            }
            self.net.commit_running_stats(params, &out.running, opts.mask);
            losses.push(loss);
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("local model parameters".into()));
        }
        Ok(losses)
    }

    /// Mean clean cross-entropy over the local data in eval mode.
    pub fn eval_loss(&self, params: &ParamVector) -> Result<f64> {
        let mut total = 0.0;
        for chunk in self.indices.chunks(256) {
            let (x, y) = self.data.batch(chunk);
            let logits = self.net.forward(params, &x, Mode::Eval)?;
            total += crate::nn::cross_entropy(&logits, &y)?.0 * chunk.len() as f64;
        }
        Ok(total / self.indices.len().max(1) as f64)
    }
}

/// `(lambda / 2) |theta - anchor|^2` over trainable coordinates.
pub fn prox_penalty(params: &ParamVector, anchor: &ParamVector, lambda: f32) -> Result<f64> {
    params.check_layout(anchor)?;
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let (p, a) = (params.values(), anchor.values());
    let sq: f64 = params
        .layout()
        .entries()
        .iter()
        .filter(|e| e.kind.is_trainable())
        .flat_map(|e| e.range())
        .map(|i| (p[i] as f64 - a[i] as f64).powi(2))
        .sum();
    Ok(0.5 * lambda as f64 * sq)
}

/// Proximal map of `(lambda / 2) |theta - anchor|^2` with step `lr`, applied
/// after the plain gradient step: `theta <- (theta + lr*lambda*anchor) / (1 + lr*lambda)`.
/// Stable for any `lambda`; to first order it equals adding `lambda (theta - anchor)`
/// to the gradient.
pub fn prox_step(params: &mut ParamVector, anchor: &ParamVector, lambda: f32, lr: f32, mask: Option<&CoordMask>) -> Result<()> {
    params.check_layout(anchor)?;
    if lambda == 0.0 {
        return Ok(());
    }
    let layout = params.layout().clone();
    let k = lr as f64 * lambda as f64;
    let a = anchor.values();
    let p = params.values_mut();
    for e in layout.entries().iter().filter(|e| e.kind.is_trainable()) {
        for i in e.range().filter(|&i| mask.is_none_or(|m| m.get(i))) {
            p[i] = ((p[i] as f64 + k * a[i] as f64) / (1.0 + k)) as f32;
        }
    }
    Ok(())
}
