//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use pflsim::nn::{cross_entropy, LayerSpec, Mode, Network, NetworkSpec, ParamKind, ParamVector};
use pflsim::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straightforward nested-loop forward pass in f64, written without the
/// im2col/GEMM machinery of the library.
pub fn naive_forward(spec: &NetworkSpec, params: &ParamVector<f64>, x: &Tensor<f64>, train: bool) -> Vec<f64> {
    let layout = params.layout();
    let p = params.values();
    let n = x.batch();
    let mut shape: Vec<usize> = spec.input_shape.clone();
    let mut act: Vec<f64> = x.data().to_vec();
    for (li, layer) in spec.layers.iter().enumerate() {
        let get = |k: ParamKind| {
            let e = layout.entry(li, k).unwrap();
            &p[e.range()]
        };
        match *layer {
            LayerSpec::Dense { out } => {
                let inw = shape[0];
                let (w, b) = (get(ParamKind::Weight), get(ParamKind::Bias));
                let mut y = vec![0.0; n * out];
                for s in 0..n {
                    for o in 0..out {
                        let mut acc = b[o];
                        for i in 0..inw {
                            acc += act[s * inw + i] * w[i * out + o];
                        }
                        y[s * out + o] = acc;
                    }
                }
                act = y;
                shape = vec![out];
            }
            LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                let (c, h, wd) = (shape[0], shape[1], shape[2]);
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (wd + 2 * padding - kernel) / stride + 1;
                let (w, b) = (get(ParamKind::Weight), get(ParamKind::Bias));
                let mut y = vec![0.0; n * out_channels * oh * ow];
                for s in 0..n {
                    for o in 0..out_channels {
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut acc = b[o];
                                for ci in 0..c {
                                    for ki in 0..kernel {
                                        for kj in 0..kernel {
                                            let yy = (i * stride + ki) as isize - padding as isize;
                                            let xx = (j * stride + kj) as isize - padding as isize;
                                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                                continue;
                                            }
                                            let v = act[((s * c + ci) * h + yy as usize) * wd + xx as usize];
                                            acc += v * w[((o * c + ci) * kernel + ki) * kernel + kj];
                                        }
                                    }
                                }
                                y[((s * out_channels + o) * oh + i) * ow + j] = acc;
                            }
                        }
                    }
                }
                act = y;
                shape = vec![out_channels, oh, ow];
            }
            LayerSpec::ConvTranspose2d { out_channels, kernel, stride, padding } => {
                let (c, h, wd) = (shape[0], shape[1], shape[2]);
                let oh = (h - 1) * stride + kernel - 2 * padding;
                let ow = (wd - 1) * stride + kernel - 2 * padding;
                let (w, b) = (get(ParamKind::Weight), get(ParamKind::Bias));
                let mut y = vec![0.0; n * out_channels * oh * ow];
                for s in 0..n {
                    for o in 0..out_channels {
                        for i in 0..oh * ow {
                            y[(s * out_channels + o) * oh * ow + i] = b[o];
                        }
                    }
                    // scatter form: input pixel (i, j) spreads a kernel window
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..wd {
                                let v = act[((s * c + ci) * h + i) * wd + j];
                                for o in 0..out_channels {
                                    for ki in 0..kernel {
                                        for kj in 0..kernel {
                                            let yy = (i * stride + ki) as isize - padding as isize;
                                            let xx = (j * stride + kj) as isize - padding as isize;
                                            if yy < 0 || xx < 0 || yy >= oh as isize || xx >= ow as isize {
                                                continue;
                                            }
                                            y[((s * out_channels + o) * oh + yy as usize) * ow + xx as usize] +=
                                                v * w[((ci * out_channels + o) * kernel + ki) * kernel + kj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                act = y;
                shape = vec![out_channels, oh, ow];
            }
            LayerSpec::BatchNorm => {
                let c = shape[0];
                let sp: usize = shape.iter().skip(1).product();
                let (g, b) = (get(ParamKind::BnGamma), get(ParamKind::BnBeta));
                let (rm, rv) = (get(ParamKind::BnRunningMean), get(ParamKind::BnRunningVar));
                let mut y = act.clone();
                for ch in 0..c {
                    let vals: Vec<f64> =
                        (0..n).flat_map(|s| (0..sp).map(move |k| (s, k))).map(|(s, k)| act[(s * c + ch) * sp + k]).collect();
                    let (mean, var) = if train {
                        let m = vals.iter().sum::<f64>() / vals.len() as f64;
                        (m, vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64)
                    } else {
                        (rm[ch], rv[ch])
                    };
                    for s in 0..n {
                        for k in 0..sp {
                            let i = (s * c + ch) * sp + k;
                            y[i] = g[ch] * (act[i] - mean) / (var + 1e-5).sqrt() + b[ch];
                        }
                    }
                }
                act = y;
            }
            LayerSpec::Relu => act.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerSpec::Tanh => act.iter_mut().for_each(|v| *v = v.tanh()),
            LayerSpec::Flatten => shape = vec![shape.iter().product()],
        }
    }
    act
}

/// Random parameters with non-trivial BN statistics, in f64.
pub fn random_params(net: &Network, seed: u64) -> ParamVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = net.init_params(&mut rng).cast::<f64>();
    let layout = p.layout().clone();
    for e in layout.entries() {
        let dst = p.slice_mut(e);
        match e.kind {
            ParamKind::BnGamma => dst.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5)),
            ParamKind::BnBeta | ParamKind::BnRunningMean => dst.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5)),
            ParamKind::BnRunningVar => dst.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0)),
            _ => {}
        }
    }
    p
}

pub fn random_input(shape: &[usize], batch: usize, seed: u64, away_from_zero: bool) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let n: usize = shape.iter().product::<usize>() * batch;
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if away_from_zero {
                v.signum() * (0.1 + v.abs())
            } else {
                v
            }
        })
        .collect();
    let mut full = vec![batch];
    full.extend_from_slice(shape);
    Tensor::new(full, data).unwrap()
}

/// Scalar objective used for gradient checks: cross-entropy for classifiers,
/// a fixed random linear functional of the output for generators.
pub struct Objective {
    pub labels: Vec<usize>,
    pub weights: Option<Vec<f64>>,
}

impl Objective {
    pub fn for_net(net: &Network, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        match net.classes() {
            Some(k) => Objective { labels: (0..batch).map(|_| rng.random_range(0..k)).collect(), weights: None },
            None => {
                let len = batch * net.output_shape().iter().product::<usize>();
                Objective { labels: vec![], weights: Some((0..len).map(|_| rng.random_range(-1.0..1.0)).collect()) }
            }
        }
    }

    pub fn value(&self, net: &Network, p: &ParamVector<f64>, x: &Tensor<f64>, mode: Mode) -> f64 {
        let out = net.forward(p, x, mode).unwrap();
        match &self.weights {
            None => cross_entropy(&out, &self.labels).unwrap().0,
            Some(w) => out.data().iter().zip(w).map(|(a, b)| a * b).sum(),
        }
    }

    pub fn analytic(&self, net: &Network, p: &ParamVector<f64>, x: &Tensor<f64>, mode: Mode) -> (Vec<f64>, Vec<f64>) {
        let trace = net.forward_trace(p, x, mode).unwrap();
        let grad_out = match &self.weights {
            None => cross_entropy(trace.output(), &self.labels).unwrap().1,
            Some(w) => Tensor::new(trace.output().shape().to_vec(), w.clone()).unwrap(),
        };
        let (g, gx) = net.backward_trace(p, &trace, &grad_out, true).unwrap();
        (g.into_values(), gx.unwrap().into_data())
    }
}

pub const FD_STEP: f64 = 1e-3;
/// Magnitude below which relative error is measured against this floor
/// instead of the (vanishing) gradient itself.
pub const FD_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Largest relative error between analytic and central-difference
/// gradients over every trainable parameter and every input coordinate.
pub fn max_fd_error(net: &Network, seed: u64, batch: usize, mode: Mode, away_from_zero: bool) -> (f64, f64) {
    max_fd_error_with_step(net, seed, batch, mode, away_from_zero, FD_STEP)
}

pub fn max_fd_error_with_step(
    net: &Network,
    seed: u64,
    batch: usize,
    mode: Mode,
    away_from_zero: bool,
    step: f64,
) -> (f64, f64) {
    let p = random_params(net, seed);
    let x = random_input(net.input_shape(), batch, seed, away_from_zero);
    let obj = Objective::for_net(net, batch, seed);
    let (gp, gx) = obj.analytic(net, &p, &x, mode);
    let mut worst_p: f64 = 0.0;
    for e in p.layout().entries().iter().filter(|e| e.kind.is_trainable()) {
        for i in e.range() {
            let mut plus = p.clone();
            plus.values_mut()[i] += step;
            let mut minus = p.clone();
            minus.values_mut()[i] -= step;
            let fd = (obj.value(net, &plus, &x, mode) - obj.value(net, &minus, &x, mode)) / (2.0 * step);
            worst_p = worst_p.max(rel_err(gp[i], fd));
        }
    }
    let mut worst_x: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fd = (obj.value(net, &p, &plus, mode) - obj.value(net, &p, &minus, mode)) / (2.0 * step);
        worst_x = worst_x.max(rel_err(gx[i], fd));
    }
    (worst_p, worst_x)
}

/// One small network per layer kind, each ending in a classifier so the
/// check runs through cross-entropy.
pub fn layer_probes() -> Vec<(&'static str, NetworkSpec, Mode, bool)> {
    use LayerSpec::*;
    let cls = |input: Vec<usize>, layers: Vec<LayerSpec>| NetworkSpec { input_shape: input, layers, classes: Some(3), head_split: None };
    vec![
        ("dense", cls(vec![5], vec![Dense { out: 3 }]), Mode::Train, false),
        (
            "conv2d",
            cls(vec![2, 5, 5], vec![Conv2d { out_channels: 3, kernel: 3, stride: 2, padding: 1 }, Flatten, Dense { out: 3 }]),
            Mode::Train,
            false,
        ),
        (
            "conv_transpose2d",
            cls(
                vec![2, 3, 3],
                vec![ConvTranspose2d { out_channels: 2, kernel: 4, stride: 2, padding: 1 }, Flatten, Dense { out: 3 }],
            ),
            Mode::Train,
            false,
        ),
        ("batchnorm2d_train", cls(vec![2, 3, 3], vec![BatchNorm, Flatten, Dense { out: 3 }]), Mode::Train, false),
        ("batchnorm2d_eval", cls(vec![2, 3, 3], vec![BatchNorm, Flatten, Dense { out: 3 }]), Mode::Eval, false),
        ("batchnorm1d_train", cls(vec![4], vec![BatchNorm, Dense { out: 3 }]), Mode::Train, false),
        ("relu", cls(vec![6], vec![Relu, Dense { out: 3 }]), Mode::Train, true),
        ("tanh", cls(vec![6], vec![Tanh, Dense { out: 3 }]), Mode::Train, false),
        ("flatten", cls(vec![2, 2, 2], vec![Flatten, Dense { out: 3 }]), Mode::Train, false),
    ]
}

/// Brute-force aggregation rules over plain `Vec<Vec<f32>>` uploads.
pub mod agg {
    pub fn mean(col: &[f32]) -> f32 {
        let mut s = 0.0f64;
        for &v in col {
            s += v as f64;
        }
        (s / col.len() as f64) as f32
    }

    fn column(uploads: &[Vec<f32>], i: usize) -> Vec<f32> {
        uploads.iter().map(|u| u[i]).collect()
    }

    pub fn fedavg(uploads: &[Vec<f32>]) -> Vec<f32> {
        (0..uploads[0].len()).map(|i| mean(&column(uploads, i))).collect()
    }

    pub fn clip_avg(uploads: &[Vec<f32>], t: f32) -> Vec<f32> {
        (0..uploads[0].len())
            .map(|i| {
                let c: Vec<f32> = column(uploads, i).into_iter().map(|v| v.max(-t).min(t)).collect();
                mean(&c)
            })
            .collect()
    }

    pub fn median(uploads: &[Vec<f32>]) -> Vec<f32> {
        (0..uploads[0].len())
            .map(|i| {
                let mut c = column(uploads, i);
                c.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = c.len();
                if n % 2 == 1 {
                    c[n / 2]
                } else {
                    ((c[n / 2 - 1] as f64 + c[n / 2] as f64) / 2.0) as f32
                }
            })
            .collect()
    }

    pub fn sign(global: &[f32], uploads: &[Vec<f32>], eta: f32) -> Vec<f32> {
        (0..global.len())
            .map(|i| {
                let m = column(uploads, i).iter().map(|&v| v as f64 - global[i] as f64).sum::<f64>()
                    / uploads.len() as f64;
                let s = if m > 0.0 {
                    1.0
                } else if m < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                global[i] + eta * s
            })
            .collect()
    }

    pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
    }

    /// Exhaustive Krum: score every upload by enumerating all distances,
    /// then pick the `m_sel` lowest scores. Returns the selected positions.
    pub fn krum_select(uploads: &[Vec<f32>], f: usize, m_sel: usize) -> Vec<usize> {
        let n = uploads.len();
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(&uploads[i], &uploads[j])).collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d.iter().take(n - f - 2).sum()
            })
            .collect();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        let mut sel = idx[..m_sel].to_vec();
        sel.sort();
        sel
    }
}

/// A flat single-entry layout for aggregation tests.
pub fn flat_vector(values: Vec<f32>) -> ParamVector {
    use pflsim::nn::{LayoutEntry, ParamLayout};
    let n = values.len();
    let layout = ParamLayout::from_entries(vec![LayoutEntry {
        name: "0.dense.weight".into(),
        kind: ParamKind::Weight,
        offset: 0,
        shape: vec![n],
        layer: 0,
    }])
    .unwrap();
    ParamVector::new(std::sync::Arc::new(layout), values).unwrap()
}

/// Random aggregation instance: (global, uploads) with `n` uploads of `d`
/// coordinates, values spread over a few magnitudes.
pub fn random_uploads(seed: u64, n: usize, d: usize) -> (Vec<f32>, Vec<Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: f32 = [0.1, 1.0, 3.0][rng.random_range(0..3)];
    let global: Vec<f32> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
    let uploads = (0..n).map(|_| global.iter().map(|g| g + rng.random_range(-scale..scale)).collect()).collect();
    (global, uploads)
}
