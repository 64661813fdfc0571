//! Trigger construction: the Bad-PFL target feature and disruptive noise,
//! and the fixed patch used by the baselines.

use crate::data::{stamp_patch_batch, PatchSpec};
use crate::error::{Error, Result};
use crate::nn::{Mode, Network, ParamVector};
use crate::tensor::{sign, Tensor};

/// Anything that turns a clean batch into a triggered one.
pub trait Trigger: Sync {
    /// `model` is the classifier that sample-specific parts are crafted against.
    fn apply(&self, net: &Network, model: &ParamVector, x: &Tensor, y: &[usize]) -> Result<Tensor>;
}

/// The fixed-patch trigger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchTrigger(pub PatchSpec);

impl Trigger for PatchTrigger {
    fn apply(&self, _net: &Network, _model: &ParamVector, x: &Tensor, _y: &[usize]) -> Result<Tensor> {
        stamp_patch_batch(x, &self.0)
    }
}

/// Leaves the batch alone.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTrigger;

impl Trigger for IdentityTrigger {
    fn apply(&self, _net: &Network, _model: &ParamVector, x: &Tensor, _y: &[usize]) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// `xi = sigma * sign(grad_x CE(F(x; theta), y))`, eval-mode BN.
pub fn craft_disruptive_noise(net: &Network, theta: &ParamVector, x: &Tensor, y: &[usize], sigma: f32) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Tensor::zeros(x.shape().to_vec()));
    }
    let g = net.backward(theta, x, y, Mode::Eval, true)?.input_grad.expect("input gradient requested");
    if !g.all_finite() {
        return Err(Error::NonFinite("input gradient for disruptive noise".into()));
    }
    Ok(g.map(|v| sigma * sign(v)))
}

/// `delta = epsilon * G_w(x)`, eval-mode BN.
///
/// tanh keeps the generator output inside (-1, 1), but f32 rounding can
/// land exactly on the bound, so the product is pulled strictly inside.
pub fn craft_target_feature(gen_net: &Network, gen: &ParamVector, x: &Tensor, epsilon: f32) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if gen_net.output_shape() != &x.shape()[1..] {
        return Err(Error::shape(format!(
            "generator output {:?} does not match input {:?}",
            gen_net.output_shape(),
            &x.shape()[1..]
        )));
    }
    if epsilon == 0.0 {
        return Ok(Tensor::zeros(x.shape().to_vec()));
    }
    let out = gen_net.forward(gen, x, Mode::Eval)?;
    let inside = epsilon.next_down();
    Ok(out.map(|v| (epsilon * v).clamp(-inside, inside)))
}

/// A batch together with the pieces of its trigger.
#[derive(Debug, Clone)]
pub struct TriggeredBatch {
    pub x: Tensor,
    pub delta: Tensor,
    pub xi: Tensor,
    pub triggered: Tensor,
    pub relabel: Vec<usize>,
}

/// Composes `x + delta + xi`, clamps to `[0, 1]` and relabels to `target`.
pub fn compose_trigger(x: &Tensor, delta: Tensor, xi: Tensor, target: usize) -> Result<TriggeredBatch> {
    if delta.shape() != x.shape() || xi.shape() != x.shape() {
        return Err(Error::shape("trigger components do not match the batch"));
    }
    let triggered = x.add(&delta)?.add(&xi)?.clamp(0.0, 1.0);
    let relabel = vec![target; x.batch()];
    Ok(TriggeredBatch { x: x.clone(), delta, xi, triggered, relabel })
}

/// The Bad-PFL trigger generation function.
#[derive(Debug, Clone, Copy)]
pub struct BadPflTrigger<'a> {
    pub gen_net: &'a Network,
    pub gen: &'a ParamVector,
    pub epsilon: f32,
    pub sigma: f32,
    pub use_delta: bool,
    pub use_xi: bool,
}

impl BadPflTrigger<'_> {
    pub fn craft(&self, net: &Network, model: &ParamVector, x: &Tensor, y: &[usize], target: usize) -> Result<TriggeredBatch> {
        let delta = if self.use_delta {
            craft_target_feature(self.gen_net, self.gen, x, self.epsilon)?
        } else {
            Tensor::zeros(x.shape().to_vec())
        };
        let xi = if self.use_xi {
            craft_disruptive_noise(net, model, x, y, self.sigma)?
        } else {
            Tensor::zeros(x.shape().to_vec())
        };
        compose_trigger(x, delta, xi, target)
    }
}

/// Free-standing form: both crafts, composed and relabelled.
#[allow(clippy::too_many_arguments)]
pub fn apply_trigger(
    gen_net: &Network,
    gen: &ParamVector,
    net: &Network,
    theta: &ParamVector,
    x: &Tensor,
    y: &[usize],
    epsilon: f32,
    sigma: f32,
    target: usize,
) -> Result<TriggeredBatch> {
    BadPflTrigger { gen_net, gen, epsilon, sigma, use_delta: true, use_xi: true }.craft(net, theta, x, y, target)
}

impl Trigger for BadPflTrigger<'_> {
    fn apply(&self, net: &Network, model: &ParamVector, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        Ok(self.craft(net, model, x, y, 0)?.triggered)
    }
}
