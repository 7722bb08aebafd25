//! Gaussian-mixture prototype flow matching for open-set anomaly detection
//! over feature vectors.
//!
//! The library learns a flow that transports pooled feature vectors of
//! normal samples onto a Gaussian-mixture prototype space, repels the few
//! labeled anomalies, and scores unseen samples with four complementary
//! heads. Everything runs in `f64` on the CPU and is deterministic given a
//! seed.
//!
//! Main entry points:
//! - [`data`]: synthetic open-set dataset generation and the dataset file
//!   format.
//! - [`train`]: the joint training loop (flow, prototype means, scoring
//!   heads) with decoupled-weight-decay Adam.
//! - [`scoring`]: per-sample score breakdowns.
//! - [`eval`]: rank-based ROC-AUC and experiment orchestration.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flow;
pub mod gmm;
pub mod mutual_info;
pub mod nn;
pub mod reverse;
pub mod rng;
pub mod scoring;
pub mod selfcheck;
pub mod snapshot;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
