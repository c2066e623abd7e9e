//! Task-aware neural architecture inference.
//!
//! A deep value network (DVN) learns to predict how well a continuously
//! parametrized child architecture performs on a task, using the architecture
//! encoding together with task meta-features that are either precomputed or
//! learned from raw samples with a permutation-invariant set embedding. Once
//! trained, the DVN proposes architectures for unseen tasks by gradient ascent
//! on its output, without training any child model on the new task.
//!
//! Module map:
//!
//! - [`nn`]: dense layers, MLPs with analytic backprop, optimizers.
//! - [`encoding`]: the continuous search space `u = {alpha, beta, gamma}`.
//! - [`task`]: task datasets, synthetic generation, CSV ingestion, meta-features.
//! - [`child`]: the continuously parametrized child classifier and its trainer.
//! - [`db`]: the append-only experiment database and per-task normalization.
//! - [`dvn`]: the value network and its offline training loop.
//! - [`inference`]: multi-restart gradient ascent over encodings.
//! - [`eval`]: metrics, leave-one-out evaluation, studies and PCA.

pub mod child;
pub mod db;
pub mod dvn;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod inference;
pub mod nn;
pub mod par;
pub mod seeding;
pub mod task;

pub use error::{Error, Result};
