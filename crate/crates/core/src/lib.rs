//! Reference governor built on logarithmic-norm error bounds.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod error;
pub mod exec;
pub mod governor;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod norms;
pub mod qp;
pub mod sim;

pub use error::{Error, Result};
