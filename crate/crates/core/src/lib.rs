//! Multi-channel hierarchical graph convolutional networks for graph
//! classification, built on a small reverse-mode autodiff engine over dense
//! `f64` tensors.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense arrays and the define-by-run gradient tape.
//! - [`graphio`]: TU-format I/O, node features, synthetic datasets, folds and
//!   padded batches.
//! - [`layers`] and [`model`]: message passing, channel filters, soft
//!   pooling, and the full model with its ablations and baselines.
//! - [`train`]: loss, Adam, gradient clipping and cross-validation.
//! - [`verify`]: finite-difference gradient checks, a tape-free reference
//!   forward, the distinguishability check and the runtime benchmark.
//! - [`config`] and [`experiment`]: the JSON run configuration and a full
//!   cross-validation run with its output files.

pub mod config;
pub mod error;
pub mod experiment;
pub mod graphio;
pub mod layers;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
