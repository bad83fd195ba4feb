// NaN-rejecting range checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod error;
pub mod evalmetrics;
pub mod imagecore;
pub mod losses;
pub mod pipeline;
pub mod semanticmask;
pub mod synth;

pub use error::{Error, Result};
