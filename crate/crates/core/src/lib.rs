//! Linear instrumental-variables regression: k-class estimators,
//! weak-instrument-robust tests, misspecification diagnostics and confidence
//! sets by test inversion.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clr;
pub mod confsets;
pub mod data;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod misspec;
pub mod moments;
pub mod special;
pub mod wir;

pub use error::{IvError, Result};
