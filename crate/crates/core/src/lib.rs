//! Continual Bayesian learning networks.
//!
//! One mean-field Bayesian MLP is trained per task. The per-weight Gaussian
//! posteriors of all tasks are then merged into small per-weight mixtures
//! with EM, pruning and mean clustering, so that similar task solutions share
//! parameters while distinct ones are kept. At test time every stored task
//! solution is scored on a probe batch by Monte-Carlo predictive uncertainty,
//! and the least uncertain one makes the prediction.
//!
//! Module map:
//!
//! - [`numerics`]: matrices, seeded random streams, softmax, Adam.
//! - [`bnn`]: variational MLP, ELBO loss and its gradients, task training.
//! - [`mixture`]: EM fit, per-weight merge, merged model and task views.
//! - [`inference`]: MC prediction, uncertainty measures, task selection.
//! - [`datasets`]: MNIST IDX and UCR loaders, split/permuted task streams.
//! - [`experiment`]: end-to-end experiment protocols and run reports.
//! - [`persist`]: binary model and snapshot files.

pub mod bnn;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod mixture;
pub mod numerics;
pub mod persist;

pub use error::{Error, Result};

/// Identifier of a task, assigned in training order starting at 0.
pub type TaskId = usize;
