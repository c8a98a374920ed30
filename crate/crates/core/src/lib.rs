//! Implicit-bias laboratory for a single-layer self-attention classifier.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod svm;

pub use error::{Error, Result};
