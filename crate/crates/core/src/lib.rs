//! Core library for a representation-fusion RL workbench.
//!
//! The crate is organized around five subsystems:
//!
//! - [`numerics`]: dense/convolutional layers over a small tensor type, a
//!   trace-based backward pass with a fixed op vocabulary, Adam, and a
//!   finite-difference gradient oracle for tests.
//! - [`env`]: deterministic toy arcade games (`minipong`, `minibreakout`)
//!   with frame-stacked image observations and a variation system
//!   (entity recoloring, lazy opponent).
//! - [`pretrain`]: frame-dataset collection and the four frozen encoders
//!   (autoencoder, temporal-contrastive, keypoint, motion-mask).
//! - [`fusion`]: the weight-sharing attention combiner and all rival
//!   combination modules (lin, fix, cnn, mix, res, dpa, ens), plus the
//!   dynamic model pool used by the scaling experiments.
//! - [`rl`]: PPO and DQN on top of any combiner, the end-to-end /
//!   single-model / full-training baselines, and policy evaluation.

pub mod env;
pub mod error;
pub mod fusion;
pub mod numerics;
pub mod pretrain;
pub mod rl;
pub mod rng;

pub use error::{CoreError, Result};
