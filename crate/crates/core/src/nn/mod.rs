//! Numerical kernel: networks, losses, gradients and optimizers.

pub mod checkpoint;
pub mod kernels;
pub mod loss;
pub mod network;
pub mod optim;
pub mod params;
pub mod spec;

pub use loss::cross_entropy;
pub use network::{GradResult, Mode, Network, RunningStats, Trace};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{CoordMask, LayoutEntry, ParamKind, ParamLayout, ParamVector};
pub use spec::{LayerSpec, NetworkSpec};
