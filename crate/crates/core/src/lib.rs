//! Gaussian-process state-space models learned by EnKF-aided variational
//! inference, with an exact Kalman-filter oracle and synthetic benchmarks.
//!
//! The crate is organized around the training pipeline:
//!
//! * [`diffgraph`] — reverse-mode differentiation over dense matrices,
//!   enough to backpropagate a full filtering rollout (BPTT).
//! * [`gp`] — ARD squared-exponential kernels, sparse-GP conditionals with
//!   inducing points, the variational family, and closed-form KL terms.
//! * [`enkf`] — the differentiable ensemble Kalman filter built on the tape.
//! * [`models`] — the EnVI bound, offline training, the online OEnVI step,
//!   forecasting and checkpoints.
//! * [`baselines`] — exact Kalman filter and linear-Gaussian simulator used
//!   as oracles.
//! * [`data`] — synthetic kink dynamics, CSV ingestion, standardization and
//!   evaluation metrics.

pub mod baselines;
pub mod data;
pub mod diffgraph;
pub mod enkf;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod models;

pub use error::{Error, Result};
