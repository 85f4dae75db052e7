//! Deterministic simulation of labels-at-server semi-supervised federated
//! learning.
//!
//! The server holds a small labeled set and trains a supervised model `σ`;
//! clients hold only unlabeled shards and train unsupervised models `ψ_k`
//! with pseudo-labels, consistency regularization and a proximal pull
//! towards `σ`. Client models are combined with frequency-aware weights
//! (FedFreq) and the global model is a convex mix of the aggregated
//! unsupervised model, the supervised model and the previous global model
//! (FedMix).
//!
//! Module map:
//!
//! - [`nn`]: dense softmax network, manual backprop, SGD
//! - [`data`]: datasets, CIFAR-10 binary loader, Dirichlet partitioning
//! - [`augment`]: seeded input perturbations
//! - [`ssl_loss`]: supervised, consistency, pseudo-label and proximal losses
//! - [`federation`]: the round engine and aggregation rules
//! - [`eval`]: accuracy, pseudo-label quality and partition diagnostics
//! - [`harness`]: experiment configs, grids, metric files and exports

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod ssl_loss;

pub use error::{Error, Result};
pub use nn::{Matrix, ModelParams};
