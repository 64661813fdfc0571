//! SGD and Adam over [`ParamVector`]s.

use crate::error::{Error, Result};
use crate::nn::params::{CoordMask, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn sgd(lr: f32) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn adam(lr: f32, len: usize) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One update. BN running statistics are never touched, and neither is
    /// any coordinate outside `mask`.
    pub fn step(&mut self, params: &mut ParamVector, grads: &ParamVector, mask: Option<&CoordMask>) -> Result<()> {
        params.check_layout(grads)?;
        if mask.is_some_and(|m| m.len() != params.len()) {
            return Err(Error::Layout("mask length differs from parameter count".into()));
        }
        if self.kind == OptimizerKind::Adam && self.m.len() != params.len() {
            return Err(Error::Layout("adam moment buffers do not match the parameter layout".into()));
        }
        self.step += 1;
        let layout = params.layout().clone();
        let lr = self.lr as f64;
        let (bc1, bc2) = (1.0 - self.beta1.powi(self.step as i32), 1.0 - self.beta2.powi(self.step as i32));
        let g = grads.values();
        let p = params.values_mut();
        for e in layout.entries().iter().filter(|e| e.kind.is_trainable()) {
            for i in e.range() {
                if mask.is_some_and(|m| !m.get(i)) {
                    continue;
                }
                match self.kind {
                    OptimizerKind::Sgd => p[i] = (p[i] as f64 - lr * g[i] as f64) as f32,
                    OptimizerKind::Adam => {
                        let gi = g[i] as f64;
                        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
                        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
                        let mhat = self.m[i] / bc1;
                        let vhat = self.v[i] / bc2;
                        p[i] = (p[i] as f64 - lr * mhat / (vhat.sqrt() + self.eps)) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Network, NetworkSpec};
    use rand::SeedableRng;

    fn net() -> Network {
        let spec = NetworkSpec::desk_classifier(1, 8, 3);
        Network::new(spec).unwrap()
    }

    #[test]
    fn sgd_single_coordinate() {
        let n = net();
        let mut p = ParamVector::zeros(n.layout().clone());
        p.values_mut()[0] = 1.0;
        let mut g = ParamVector::zeros(n.layout().clone());
        g.values_mut()[0] = 0.5;
        OptimizerState::sgd(0.1).step(&mut p, &g, None).unwrap();
        assert!((p.values()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_identity_under_sgd() {
        let n = net();
        let p0 = n.init_params(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let mut p = p0.clone();
        OptimizerState::sgd(0.1).step(&mut p, &ParamVector::zeros(n.layout().clone()), None).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let n = net();
        let len = n.layout().len();
        for scale in [1e-4f32, 1.0, 1e3] {
            let mut p = ParamVector::zeros(n.layout().clone());
            let mut g = ParamVector::zeros(n.layout().clone());
            g.values_mut()[3] = 0.7 * scale;
            g.values_mut()[4] = -2.0 * scale;
            let mut st = OptimizerState::adam(0.01, len);
            st.step(&mut p, &g, None).unwrap();
            for (i, gi) in [(3usize, 0.7f64 * scale as f64), (4, -2.0 * scale as f64)] {
                // direct formula: m = 0.1 g, v = 0.001 g^2, bias-corrected
                let mhat = 0.1 * gi / 0.1;
                let vhat = 0.001 * gi * gi / (1.0 - 0.999);
                let want = -0.01 * mhat / (vhat.sqrt() + 1e-8);
                assert!((p.values()[i] as f64 - want).abs() < 1e-6, "{scale}: {} vs {want}", p.values()[i]);
                // eps = 1e-8 only matters relative to tiny gradients
                assert!((want.abs() - 0.01).abs() / 0.01 < 1e-3);
            }
        }
    }

    #[test]
    fn running_stats_and_masked_coords_are_skipped() {
        let n = net();
        let mut p = ParamVector::zeros(n.layout().clone());
        let g = p.with_values(vec![1.0; p.len()]).unwrap();
        let mut mask = CoordMask::all(p.len());
        mask.0[0] = false;
        OptimizerState::sgd(1.0).step(&mut p, &g, Some(&mask)).unwrap();
        assert_eq!(p.values()[0], 0.0);
        for e in n.layout().entries() {
            let moved = p.slice(e).iter().any(|v| *v != 0.0);
            assert_eq!(moved, e.kind.is_trainable(), "{}", e.name);
        }
    }
}
