//! The trigger generator and its training loop.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::BatchSampler;
use crate::nn::{Mode, Network, NetworkSpec, OptimizerState, ParamVector};
use crate::tensor::Tensor;

use super::trigger::craft_disruptive_noise;

/// Generator weights plus the Adam state that travels with them.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub net: Network,
    pub params: ParamVector,
    pub opt: OptimizerState,
}

impl GeneratorParams {
    pub fn new(spec: NetworkSpec, lr: f32, rng: &mut impl Rng) -> Result<Self> {
        let net = Network::new(spec)?;
        let params = net.init_params(rng);
        let opt = OptimizerState::adam(lr, params.len());
        Ok(Self { net, params, opt })
    }
}

/// Knobs of one generator training session.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTraining {
    pub target: usize,
    pub epsilon: f32,
    pub sigma: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub use_xi: bool,
}

/// Target-label loss of the triggered batch under `theta` (generator in
/// eval mode).
pub fn generator_loss(
    gen: &GeneratorParams,
    net: &Network,
    theta: &ParamVector,
    x: &Tensor,
    y: &[usize],
    cfg: &GeneratorTraining,
) -> Result<f64> {
    let xi = noise(net, theta, x, y, cfg)?;
    let g = gen.net.forward(&gen.params, x, Mode::Eval)?;
    let pre = x.add(&g.scale(cfg.epsilon))?.add(&xi)?;
    let logits = net.forward(theta, &pre.clamp(0.0, 1.0), Mode::Eval)?;
    Ok(crate::nn::cross_entropy(&logits, &vec![cfg.target; x.batch()])?.0)
}

fn noise(net: &Network, theta: &ParamVector, x: &Tensor, y: &[usize], cfg: &GeneratorTraining) -> Result<Tensor> {
    if cfg.use_xi {
        craft_disruptive_noise(net, theta, x, y, cfg.sigma)
    } else {
        Ok(Tensor::zeros(x.shape().to_vec()))
    }
}

/// Adam on `CE(F(x + eps * G_w(x) + xi; theta), y_t)` over the local data.
/// `xi` is recomputed per batch and held constant; `theta` is frozen.
/// Returns the loss of every step.
pub fn train_generator(
    gen: &mut GeneratorParams,
    net: &Network,
    theta: &ParamVector,
    data: &Dataset,
    indices: &[usize],
    cfg: &GeneratorTraining,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if indices.is_empty() {
        return Err(Error::invalid("generator training needs local data"));
    }
    let mut sampler = BatchSampler::new(indices, cfg.batch_size);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (x, y) = data.batch(&sampler.next_batch(rng));
        let xi = noise(net, theta, &x, &y, cfg)?;
        let trace = gen.net.forward_trace(&gen.params, &x, Mode::Train)?;
        let pre = x.add(&trace.output().scale(cfg.epsilon))?.add(&xi)?;
        let res = net.backward(theta, &pre.clamp(0.0, 1.0), &vec![cfg.target; x.batch()], Mode::Eval, true)?;
        let dx = res.input_grad.expect("input gradient requested");
        // clamp passes gradient only where it was inactive
        let dg = pre.zip_map(&dx, |p, d| if (0.0..=1.0).contains(&p) { cfg.epsilon * d } else { 0.0 })?;
        let (grads, _) = gen.net.backward_trace(&gen.params, &trace, &dg, false)?;
        gen.opt.step(&mut gen.params, &grads, None)?;
        gen.net.commit_running_stats(&mut gen.params, trace.running_stats(), None);
        if !res.loss.is_finite() || !gen.params.all_finite() {
            return Err(Error::NonFinite("generator training".into()));
        }
        losses.push(res.loss);
    }
    Ok(losses)
}
