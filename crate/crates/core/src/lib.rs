//! Multi-picture video deinterlacing and demosaicing.
//!
//! Supporting pictures are aligned to the reference with deformable
//! convolution blocks, fused additively with a residual top-k self-attention
//! branch, and reconstructed by pattern-specific branches selected by an
//! indicator flag. The crate also carries degradation synthesis, training,
//! evaluation and benchmarking.

pub mod ablation;
pub mod align;
pub mod attention;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod model;
pub mod nn;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Eager, Graph, Op, Ops, Var};
pub use real::Real;
pub use tensor::Tensor;
