//! Parameter estimation for chaotic dynamical systems.
//!
//! The crate bundles everything needed to calibrate the parameters of a
//! multiscale Lorenz-96 or Kuramoto-Sivashinsky simulator from observed
//! trajectories:
//!
//! * [`dynamics`] — RK4 simulators for both systems, trajectory validation,
//!   observation noise, and a binary trajectory store.
//! * [`features`] — moment statistics, the parameter-space APE metric,
//!   crops, and positive-pair selection for contrastive training.
//! * [`graph`] — a small reverse-mode autodiff tape used by the networks.
//! * [`nn`] — trajectory encoder with regression head, parameter emulator,
//!   AdamW with warmup + cosine decay, and checkpointing.
//! * [`losses`] — InfoNCE / cross-modal alignment / MAPE losses, the FIFO
//!   memory bank, and the temperature schedule.
//! * [`enki`] — Ensemble Kalman Inversion over pluggable forward models
//!   (moment baseline or learned emulator) with Gaussian/log-normal priors.
//! * [`metrics`] — MAPE/MdAPE, CRPS, the affine probe, and objective
//!   heatmap grids.
//! * [`pipeline`] — config handling and the gen-data / train / estimate /
//!   evaluate / heatmap commands backing the CLI.

pub mod dynamics;
pub mod enki;
pub mod error;
pub mod features;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod testkit;
pub mod types;

pub use error::{CoreError, Result};
pub use linalg::RowMatrix;
pub use types::{Embedding, ParamVector};
