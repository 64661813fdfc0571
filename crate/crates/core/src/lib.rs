//! Deterministic simulator of personalized federated learning under
//! backdoor attack.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod nn;
pub mod pfl;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
