//! Tools for studying how small dense networks connect in parameter space.
//!
//! The crate generates datasets with known latent structure, trains ReLU
//! networks on them, measures loss along linear and quadratic paths between
//! trained models, aligns hidden units by permutation, tests invariance to
//! counterfactual interventions, and fine-tunes models away from a spurious
//! cue.

pub mod align;
pub mod cbft;
pub mod connect;
pub mod data;
pub mod error;
pub mod grid;
pub mod mechanism;
pub mod nn;
pub mod report;
pub mod rng;
pub mod slab;

pub use data::Dataset;
pub use error::{Error, Result};
pub use nn::{Architecture, LossKind, ModelKind, ModelParams, TrainConfig};
