//! Non-autoregressive human motion prediction on kinematic trees.
//!
//! A context encoder of stacked graph/temporal convolution blocks summarizes
//! the observed frames into one feature vector. Every future frame is decoded
//! independently from that feature plus a sinusoidal embedding of its index,
//! and added to the last observed pose. An action classifier on the same
//! feature provides an auxiliary training signal.

// `!(x > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod posenc;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Tensor;
