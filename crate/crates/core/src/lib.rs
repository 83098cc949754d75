//! Dataset distillation with pre-trained-model supervision.
//!
//! The crate bundles a small reverse-mode autodiff engine, a zoo of compact
//! image classifiers, the gradient-matching / augmented gradient-matching /
//! distribution-matching objectives, the CLoM and CCLoM supervision terms
//! computed from pools of frozen checkpoints, the outer distillation loop,
//! and a train-on-synthetic evaluation harness.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod io;
pub mod matchers;
pub mod models;
pub mod supervision;
pub mod train;

pub use autodiff::{grad, Graph, Tensor};
pub use error::{Error, Result};
