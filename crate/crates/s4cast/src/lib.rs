//! Counterfactual sequence forecasting with structured state-space models.
//!
//! This crate builds, from first principles, the full pipeline for studying
//! treatment-effect estimation on irregularly sampled clinical time series:
//!
//! - [`linalg`]: dense real/complex matrices, partial-pivot LU, Hermitian
//!   eigensolver.
//! - [`ssm`]: single-channel linear state-space models — the LegS memory
//!   matrix, its normal-plus-low-rank factorization, bilinear discretization,
//!   and recurrent/convolutional execution modes.
//! - [`autodiff`]: a tensor-valued reverse-mode differentiation tape.
//! - [`model`]: the deep state-space network with an outcome head and an
//!   adversarially trained treatment head.
//! - [`sim`]: a pharmacokinetic/pharmacodynamic tumor-growth simulator with a
//!   confounded treatment policy, self-exciting observation times, and
//!   counterfactual rollouts under shared random numbers.
//! - [`train`]: featurization, losses, Adam, the training loop, and
//!   evaluation (factual and counterfactual).
//! - [`report`]: CSV tables and SVG plots.
//! - [`exp`]: experiment orchestration — sweeps over simulator knobs,
//!   ablations, and resumable run manifests.
//! - [`cli`]: the command-line interface wiring it all together.
//!
//! The `examples/` directory is the front door: each example exercises one
//! capability end to end and prints what it verifies.

pub mod autodiff;
pub mod cli;
pub mod exp;
pub mod linalg;
pub mod model;
pub mod report;
pub mod sim;
pub mod ssm;
pub mod train;
pub mod util;
