//! Forward and reverse-mode passes over a [`NetworkSpec`].

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::kernels::{gemm, Mat, Patches};
use crate::nn::loss::cross_entropy;
use crate::nn::params::{CoordMask, LayoutEntry, ParamKind, ParamLayout, ParamVector};
use crate::nn::spec::{LayerSpec, NetworkSpec};
use crate::tensor::{Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch-norm behaviour. Always passed explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are reported for commit.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, Default)]
struct Slots {
    weight: Option<Range<usize>>,
    bias: Option<Range<usize>>,
    gamma: Option<Range<usize>>,
    beta: Option<Range<usize>>,
    mean: Option<Range<usize>>,
    var: Option<Range<usize>>,
}

/// A validated network: spec, inferred shapes, and parameter layout.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    layout: Arc<ParamLayout>,
    slots: Vec<Slots>,
}

/// Batch statistics gathered by a train-mode forward pass.
#[derive(Debug, Clone, Default)]
pub struct RunningStats {
    /// `(layer index, batch mean, unbiased batch variance)` per BN layer.
    pub layers: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl RunningStats {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    /// Per-sample im2col buffers.
    Cols(Vec<Vec<T>>),
    Bn { xhat: Vec<T>, invstd: Vec<f64>, batch_stats: bool },
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T = f32> {
    mode: Mode,
    /// `inputs[i]` is the input of layer `i`; the last element is the output.
    acts: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
    running: RunningStats,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace holds the output")
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.acts.pop().expect("trace holds the output")
    }

    pub fn running_stats(&self) -> &RunningStats {
        &self.running
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Loss, parameter gradients and (optionally) the input gradient of the
/// mean cross-entropy over a batch.
#[derive(Debug, Clone)]
pub struct GradResult<T = f32> {
    pub loss: f64,
    pub param_grads: ParamVector<T>,
    pub input_grad: Option<Tensor<T>>,
    pub logits: Tensor<T>,
    pub running: RunningStats,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.validate()?;
        let layout = Arc::new(ParamLayout::for_network(&spec, &shapes));
        let mut slots = vec![Slots::default(); spec.layers.len()];
        for e in layout.entries() {
            let s = &mut slots[e.layer];
            let r = Some(e.range());
            match e.kind {
                ParamKind::Weight => s.weight = r,
                ParamKind::Bias => s.bias = r,
                ParamKind::BnGamma => s.gamma = r,
                ParamKind::BnBeta => s.beta = r,
                ParamKind::BnRunningMean => s.mean = r,
                ParamKind::BnRunningVar => s.var = r,
            }
        }
        Ok(Self { spec, shapes, layout, slots })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn classes(&self) -> Option<usize> {
        self.spec.classes
    }

    /// Layout entries that belong to the classification head.
    pub fn is_head(&self, entry: &LayoutEntry) -> bool {
        matches!(self.spec.head_split, Some(split) if entry.layer >= split)
    }

    pub fn head_mask(&self) -> Result<CoordMask> {
        if self.spec.head_split.is_none() {
            return Err(Error::Spec("network has no head split".into()));
        }
        Ok(self.layout.mask_where(|e| self.is_head(e)))
    }

    /// Default initialisation: weights and biases uniform in
    /// `±1/sqrt(fan_in)`, BN gamma 1, beta 0, running mean 0, running var 1.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout.clone());
        self.reinit_where(&mut p, rng, |_| true);
        p
    }

    /// Re-draws every entry matching `pred` with the default scheme.
    pub fn reinit_where(&self, params: &mut ParamVector, rng: &mut impl Rng, pred: impl Fn(&LayoutEntry) -> bool) {
        let entries: Vec<LayoutEntry> = self.layout.entries().iter().filter(|e| pred(e)).cloned().collect();
        for e in entries {
            let fan_in = self.fan_in(e.layer);
            let bound = 1.0 / (fan_in as f32).sqrt();
            let dst = params.slice_mut(&e);
            match e.kind {
                ParamKind::Weight | ParamKind::Bias => {
                    dst.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                ParamKind::BnGamma | ParamKind::BnRunningVar => dst.iter_mut().for_each(|v| *v = 1.0),
                ParamKind::BnBeta | ParamKind::BnRunningMean => dst.iter_mut().for_each(|v| *v = 0.0),
            }
        }
    }

    fn fan_in(&self, layer: usize) -> usize {
        let input = &self.shapes[layer];
        match self.spec.layers[layer] {
            LayerSpec::Dense { .. } => input[0],
            LayerSpec::Conv2d { kernel, .. } => input[0] * kernel * kernel,
            LayerSpec::ConvTranspose2d { out_channels, kernel, .. } => out_channels * kernel * kernel,
            _ => 1,
        }
    }

    fn check_input<T: Real>(&self, params: &ParamVector<T>, x: &Tensor<T>) -> Result<()> {
        if **params.layout() != *self.layout {
            return Err(Error::Layout("parameters do not match the network layout".into()));
        }
        if x.shape().len() != self.shapes[0].len() + 1 || x.shape()[1..] != self.shapes[0][..] {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match network input {:?}",
                x.shape(),
                self.shapes[0]
            )));
        }
        if x.batch() == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, params: &ParamVector<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_trace(params, x, mode)?.into_output())
    }

    pub fn forward_trace<T: Real>(&self, params: &ParamVector<T>, x: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
        self.check_input(params, x)?;
        let p = params.values();
        let n = x.batch();
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut running = RunningStats::default();
        acts.push(x.clone());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let in_shape = &self.shapes[i];
            let out_shape = &self.shapes[i + 1];
            let mut full_out = vec![n];
            full_out.extend_from_slice(out_shape);
            let slots = &self.slots[i];
            let (out, cache) = match *layer {
                LayerSpec::Dense { out } => {
                    let w = &p[slots.weight.clone().unwrap()];
                    let b = &p[slots.bias.clone().unwrap()];
                    let mut y = vec![T::zero(); n * out];
                    gemm(Mat::new(input.data(), n, in_shape[0]), Mat::new(w, in_shape[0], out), &mut y, false);
                    for row in y.chunks_mut(out) {
                        row.iter_mut().zip(b).for_each(|(v, &bb)| *v = *v + bb);
                    }
                    (y, Cache::None)
                }
                LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                    let geo = conv_patches(in_shape, out_shape, kernel, stride, padding);
                    let w = &p[slots.weight.clone().unwrap()];
                    let b = &p[slots.bias.clone().unwrap()];
                    let plane = geo.cols();
                    let mut y = vec![T::zero(); n * out_channels * plane];
                    let mut all_cols = Vec::with_capacity(n);
                    for s in 0..n {
                        let mut cols = vec![T::zero(); geo.rows() * plane];
                        geo.im2col(input.item(s), &mut cols);
                        let ys = &mut y[s * out_channels * plane..(s + 1) * out_channels * plane];
                        gemm(Mat::new(w, out_channels, geo.rows()), Mat::new(&cols, geo.rows(), plane), ys, false);
                        for (o, row) in ys.chunks_mut(plane).enumerate() {
                            row.iter_mut().for_each(|v| *v = *v + b[o]);
                        }
                        all_cols.push(cols);
                    }
                    (y, Cache::Cols(all_cols))
                }
                LayerSpec::ConvTranspose2d { out_channels, kernel, stride, padding } => {
                    let geo = deconv_patches(in_shape, out_shape, kernel, stride, padding);
                    let w = &p[slots.weight.clone().unwrap()];
                    let b = &p[slots.bias.clone().unwrap()];
                    let cin = in_shape[0];
                    let grid = geo.cols();
                    let out_plane = out_shape[1] * out_shape[2];
                    let mut y = vec![T::zero(); n * out_channels * out_plane];
                    let mut cols = vec![T::zero(); geo.rows() * grid];
                    for s in 0..n {
                        gemm(Mat::t(w, geo.rows(), cin), Mat::new(input.item(s), cin, grid), &mut cols, false);
                        let ys = &mut y[s * out_channels * out_plane..(s + 1) * out_channels * out_plane];
                        geo.col2im(&cols, ys);
                        for (o, row) in ys.chunks_mut(out_plane).enumerate() {
                            row.iter_mut().for_each(|v| *v = *v + b[o]);
                        }
                    }
                    (y, Cache::None)
                }
                LayerSpec::BatchNorm => {
                    let (y, cache, stats) = bn_forward(input, in_shape[0], slots, p, mode);
                    if let Some((mean, var)) = stats {
                        running.layers.push((i, mean, var));
                    }
                    (y, cache)
                }
                LayerSpec::Relu => {
                    (input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(), Cache::None)
                }
                LayerSpec::Tanh => (input.data().iter().map(|v| v.tanh()).collect(), Cache::None),
                LayerSpec::Flatten => (input.data().to_vec(), Cache::None),
            };
            let t = Tensor::new(full_out, out)?;
            acts.push(t);
            caches.push(cache);
        }
        if !acts.last().unwrap().all_finite() {
            return Err(Error::NonFinite("forward output".into()));
        }
        Ok(Trace { mode, acts, caches, running })
    }

    /// Back-propagates `grad_out` (gradient of a scalar w.r.t. the network
    /// output) through a recorded trace.
    pub fn backward_trace<T: Real>(
        &self,
        params: &ParamVector<T>,
        trace: &Trace<T>,
        grad_out: &Tensor<T>,
        want_input_grad: bool,
    ) -> Result<(ParamVector<T>, Option<Tensor<T>>)> {
        if grad_out.shape() != trace.output().shape() {
            return Err(Error::shape(format!(
                "output gradient {:?} vs output {:?}",
                grad_out.shape(),
                trace.output().shape()
            )));
        }
        let p = params.values();
        let n = grad_out.batch();
        let mut grads = vec![0.0f64; p.len()];
        let mut dy: Vec<T> = grad_out.data().to_vec();
        for i in (0..self.spec.layers.len()).rev() {
            let need_dx = i > 0 || want_input_grad;
            let input = &trace.acts[i];
            let output = &trace.acts[i + 1];
            let in_shape = &self.shapes[i];
            let out_shape = &self.shapes[i + 1];
            let slots = &self.slots[i];
            let dx: Vec<T> = match self.spec.layers[i] {
                LayerSpec::Dense { out } => {
                    let inw = in_shape[0];
                    let wr = slots.weight.clone().unwrap();
                    let w = &p[wr.clone()];
                    let mut dw = vec![T::zero(); inw * out];
                    gemm(Mat::t(input.data(), inw, n), Mat::new(&dy, n, out), &mut dw, false);
                    add_into(&mut grads[wr], &dw);
                    let br = slots.bias.clone().unwrap();
                    for row in dy.chunks(out) {
                        for (g, v) in grads[br.clone()].iter_mut().zip(row) {
                            *g += v.f64();
                        }
                    }
                    if need_dx {
                        let mut dx = vec![T::zero(); n * inw];
                        gemm(Mat::new(&dy, n, out), Mat::t(w, out, inw), &mut dx, false);
                        dx
                    } else {
                        Vec::new()
                    }
                }
                LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                    let geo = conv_patches(in_shape, out_shape, kernel, stride, padding);
                    let Cache::Cols(all_cols) = &trace.caches[i] else { unreachable!("conv cache") };
                    let wr = slots.weight.clone().unwrap();
                    let br = slots.bias.clone().unwrap();
                    let w = &p[wr.clone()];
                    let plane = geo.cols();
                    let mut dw = vec![T::zero(); out_channels * geo.rows()];
                    let mut dcols = vec![T::zero(); geo.rows() * plane];
                    let mut dx = if need_dx { vec![T::zero(); n * input.item_len()] } else { Vec::new() };
                    for s in 0..n {
                        let dys = &dy[s * out_channels * plane..(s + 1) * out_channels * plane];
                        gemm(Mat::new(dys, out_channels, plane), Mat::t(&all_cols[s], plane, geo.rows()), &mut dw, false);
                        add_into(&mut grads[wr.clone()], &dw);
                        for (o, row) in dys.chunks(plane).enumerate() {
                            grads[br.start + o] += row.iter().map(|v| v.f64()).sum::<f64>();
                        }
                        if need_dx {
                            gemm(Mat::t(w, geo.rows(), out_channels), Mat::new(dys, out_channels, plane), &mut dcols, false);
                            let len = input.item_len();
                            geo.col2im(&dcols, &mut dx[s * len..(s + 1) * len]);
                        }
                    }
                    dx
                }
                LayerSpec::ConvTranspose2d { out_channels, kernel, stride, padding } => {
                    let geo = deconv_patches(in_shape, out_shape, kernel, stride, padding);
                    let wr = slots.weight.clone().unwrap();
                    let br = slots.bias.clone().unwrap();
                    let w = &p[wr.clone()];
                    let cin = in_shape[0];
                    let grid = geo.cols();
                    let out_plane = out_shape[1] * out_shape[2];
                    let out_len = out_channels * out_plane;
                    let mut dcols = vec![T::zero(); geo.rows() * grid];
                    let mut dw = vec![T::zero(); cin * geo.rows()];
                    let mut dx = if need_dx { vec![T::zero(); n * cin * grid] } else { Vec::new() };
                    for s in 0..n {
                        let dys = &dy[s * out_len..(s + 1) * out_len];
                        for (o, row) in dys.chunks(out_plane).enumerate() {
                            grads[br.start + o] += row.iter().map(|v| v.f64()).sum::<f64>();
                        }
                        geo.im2col(dys, &mut dcols);
                        gemm(Mat::new(input.item(s), cin, grid), Mat::t(&dcols, grid, geo.rows()), &mut dw, false);
                        add_into(&mut grads[wr.clone()], &dw);
                        if need_dx {
                            gemm(
                                Mat::new(w, cin, geo.rows()),
                                Mat::new(&dcols, geo.rows(), grid),
                                &mut dx[s * cin * grid..(s + 1) * cin * grid],
                                false,
                            );
                        }
                    }
                    dx
                }
                LayerSpec::BatchNorm => {
                    let Cache::Bn { xhat, invstd, batch_stats } = &trace.caches[i] else { unreachable!("bn cache") };
                    bn_backward(&dy, xhat, invstd, *batch_stats, in_shape[0], n, slots, p, &mut grads)
                }
                LayerSpec::Relu => dy
                    .iter()
                    .zip(input.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
                LayerSpec::Tanh => {
                    dy.iter().zip(output.data()).map(|(&g, &y)| g * (T::one() - y * y)).collect()
                }
                LayerSpec::Flatten => dy.clone(),
            };
            dy = dx;
        }
        let grads: Vec<T> = grads.into_iter().map(T::of).collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        let param_grads = ParamVector::new(params.layout().clone(), grads)?;
        let input_grad = if want_input_grad {
            let t = Tensor::new(trace.acts[0].shape().to_vec(), dy)?;
            if !t.all_finite() {
                return Err(Error::NonFinite("input gradient".into()));
            }
            Some(t)
        } else {
            None
        };
        Ok((param_grads, input_grad))
    }

    /// Mean cross-entropy of a classifier and its exact gradients.
    pub fn backward<T: Real>(
        &self,
        params: &ParamVector<T>,
        x: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
        want_input_grad: bool,
    ) -> Result<GradResult<T>> {
        let trace = self.forward_trace(params, x, mode)?;
        let (loss, dlogits) = cross_entropy(trace.output(), labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let (param_grads, input_grad) = self.backward_trace(params, &trace, &dlogits, want_input_grad)?;
        let running = trace.running.clone();
        Ok(GradResult { loss, param_grads, input_grad, logits: trace.into_output(), running })
    }

    /// Applies the momentum update of BN running statistics. Only
    /// coordinates selected by `mask` (if given) are touched.
    pub fn commit_running_stats(&self, params: &mut ParamVector, stats: &RunningStats, mask: Option<&CoordMask>) {
        let m = BN_MOMENTUM;
        for (layer, mean, var) in &stats.layers {
            let slots = &self.slots[*layer];
            let (mr, vr) = (slots.mean.clone().unwrap(), slots.var.clone().unwrap());
            let vals = params.values_mut();
            for (c, (bm, bv)) in mean.iter().zip(var).enumerate() {
                let (mi, vi) = (mr.start + c, vr.start + c);
                if mask.is_none_or(|k| k.get(mi)) {
                    vals[mi] = ((1.0 - m) * vals[mi] as f64 + m * bm) as f32;
                }
                if mask.is_none_or(|k| k.get(vi)) {
                    vals[vi] = ((1.0 - m) * vals[vi] as f64 + m * bv) as f32;
                }
            }
        }
    }
}

fn add_into<T: Real>(acc: &mut [f64], v: &[T]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b.f64();
    }
}

fn conv_patches(input: &[usize], output: &[usize], kernel: usize, stride: usize, padding: usize) -> Patches {
    Patches {
        channels: input[0],
        height: input[1],
        width: input[2],
        kernel,
        stride,
        padding,
        grid_h: output[1],
        grid_w: output[2],
    }
}

/// A transposed convolution is the adjoint of a convolution whose "image"
/// side is the (larger) output.
fn deconv_patches(input: &[usize], output: &[usize], kernel: usize, stride: usize, padding: usize) -> Patches {
    Patches {
        channels: output[0],
        height: output[1],
        width: output[2],
        kernel,
        stride,
        padding,
        grid_h: input[1],
        grid_w: input[2],
    }
}

type BnForward<T> = (Vec<T>, Cache<T>, Option<(Vec<f64>, Vec<f64>)>);

fn bn_forward<T: Real>(input: &Tensor<T>, channels: usize, slots: &Slots, p: &[T], mode: Mode) -> BnForward<T> {
    let n = input.batch();
    let spatial = input.item_len() / channels;
    let count = (n * spatial) as f64;
    let x = input.data();
    let gamma = &p[slots.gamma.clone().unwrap()];
    let beta = &p[slots.beta.clone().unwrap()];
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut invstd = vec![0.0f64; channels];
    let mut stats = None;
    let idx = |s: usize, c: usize, k: usize| (s * channels + c) * spatial + k;
    match mode {
        Mode::Train => {
            let mut means = vec![0.0; channels];
            let mut vars = vec![0.0; channels];
            for c in 0..channels {
                let mut sum = 0.0;
                for s in 0..n {
                    for k in 0..spatial {
                        sum += x[idx(s, c, k)].f64();
                    }
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for s in 0..n {
                    for k in 0..spatial {
                        let d = x[idx(s, c, k)].f64() - mean;
                        sq += d * d;
                    }
                }
                let var = sq / count;
                means[c] = mean;
                vars[c] = if count > 1.0 { sq / (count - 1.0) } else { var };
                invstd[c] = 1.0 / (var + BN_EPS).sqrt();
                for s in 0..n {
                    for k in 0..spatial {
                        let j = idx(s, c, k);
                        let xh = (x[j].f64() - mean) * invstd[c];
                        xhat[j] = T::of(xh);
                        y[j] = T::of(gamma[c].f64() * xh + beta[c].f64());
                    }
                }
            }
            stats = Some((means, vars));
        }
        Mode::Eval => {
            let rm = &p[slots.mean.clone().unwrap()];
            let rv = &p[slots.var.clone().unwrap()];
            for c in 0..channels {
                invstd[c] = 1.0 / (rv[c].f64() + BN_EPS).sqrt();
                for s in 0..n {
                    for k in 0..spatial {
                        let j = idx(s, c, k);
                        let xh = (x[j].f64() - rm[c].f64()) * invstd[c];
                        xhat[j] = T::of(xh);
                        y[j] = T::of(gamma[c].f64() * xh + beta[c].f64());
                    }
                }
            }
        }
    }
    let batch_stats = mode == Mode::Train;
    (y, Cache::Bn { xhat, invstd, batch_stats }, stats)
}

#[allow(clippy::too_many_arguments)]
fn bn_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    invstd: &[f64],
    batch_stats: bool,
    channels: usize,
    n: usize,
    slots: &Slots,
    p: &[T],
    grads: &mut [f64],
) -> Vec<T> {
    let spatial = dy.len() / (n * channels);
    let count = (n * spatial) as f64;
    let gamma = &p[slots.gamma.clone().unwrap()];
    let (gr, br) = (slots.gamma.clone().unwrap(), slots.beta.clone().unwrap());
    let idx = |s: usize, c: usize, k: usize| (s * channels + c) * spatial + k;
    let mut dx = vec![T::zero(); dy.len()];
    for c in 0..channels {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for s in 0..n {
            for k in 0..spatial {
                let j = idx(s, c, k);
                sum_dy += dy[j].f64();
                sum_dy_xhat += dy[j].f64() * xhat[j].f64();
            }
        }
        grads[gr.start + c] += sum_dy_xhat;
        grads[br.start + c] += sum_dy;
        let g = gamma[c].f64();
        for s in 0..n {
            for k in 0..spatial {
                let j = idx(s, c, k);
                let v = if batch_stats {
                    g * invstd[c] / count * (count * dy[j].f64() - sum_dy - xhat[j].f64() * sum_dy_xhat)
                } else {
                    g * invstd[c] * dy[j].f64()
                };
                dx[j] = T::of(v);
            }
        }
    }
    dx
}
