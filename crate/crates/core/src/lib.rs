//! Sharpness-aware adversarial pruning on small feed-forward networks.
//!
//! The crate is layered bottom-up: [`autodiff`] provides a tiny reverse-mode
//! tape over dense `f64` tensors, [`model`] builds prunable networks on it,
//! [`attacks`] and [`losses`] supply the adversarial objectives, [`pruner`]
//! and [`finetune`] implement mask search and weight training, and
//! [`diagnostics`] measures flatness and mask stability. [`runner`] wires
//! everything into configurable experiments.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod finetune;
pub mod losses;
pub mod model;
pub mod pruner;
pub mod runner;

pub use error::{Error, Result};
