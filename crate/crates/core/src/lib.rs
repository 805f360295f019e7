//! Entropy-regularized training of coarse-label classifiers and recovery of
//! fine-grained structure from their features.
//!
//! The crate is organized bottom-up: [`tensor`] and [`autodiff`] provide a
//! dense matrix type and a reverse-mode tape; [`nn`] and [`losses`] build
//! models and training criteria on top; [`fierce`] holds the anchor-based
//! feature-entropy regularizer; [`data`], [`recovery`] and [`metrics`]
//! implement the coarse-to-fine evaluation; [`experiment`] drives runs.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fierce;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod recovery;
pub mod tensor;

pub use autodiff::{finite_difference_gradient, Axis, GradientMap, Tape, Var};
pub use data::{CoarseFineDataset, DatasetMode, FineLabels, Split};
pub use error::{Error, Result};
pub use experiment::{Criterion, RunConfig};
pub use fierce::{AnchorSet, AnchorSpace, FierceConfig};
pub use nn::{MlpConfig, ModelParams, SgdConfig};
pub use tensor::Tensor;
