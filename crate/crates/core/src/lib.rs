//! Adaptive low-frequency amplitude prompting for frozen segmentation models.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod apex;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod spectral;
pub mod synth;
pub mod tensor;

pub use error::{ApexError, Result};
pub use exec::Exec;
pub use graph::{Graph, Var};
pub use tensor::Tensor;
