//! Joint sparsification and low-rank fine-tuning of layered linear models.
//!
//! The pipeline mirrors a progressive prune-and-adapt loop:
//!
//! - [`model`] holds the dense layer stack and captures per-layer feature maps.
//! - [`rmi`] scores layer importance from cross-layer linear CKA and turns it
//!   into per-layer sparsity rates.
//! - [`masks`] scores weights (Wanda or magnitude) and builds exact-rate or
//!   N:M masks.
//! - [`adapters`] trains masked low-rank adapters against a layer-wise
//!   reconstruction loss.
//! - [`schedule`] drives the sparsity ramp and reconstruction-error-based
//!   rank allocation.
//! - [`driver`] runs the outer loop, the baselines, merge, and evaluation.

pub mod adapters;
pub mod config;
pub mod driver;
pub mod error;
pub mod linalg;
pub mod masks;
pub mod model;
pub mod report;
pub mod rmi;
pub mod schedule;

pub use error::{LosaError, Result};
pub use linalg::{Matrix, Rng};
