//! Attention-free causal language modelling with Grassmann (Plücker) token
//! mixing, plus a size-matched causal self-attention baseline.
//!
//! The crate is layered bottom-up:
//!
//! * [`Tensor`] and [`Graph`]: dense arrays with tape-based reverse-mode
//!   differentiation and a finite-difference [`grad_check`].
//! * [`geometry`]: Plücker coordinates of 2-planes in ℝʳ.
//! * [`blocks`]: the Grassmann mixing layer and the attention layer.
//! * [`model`]: embeddings, stacked blocks and the LM head.
//! * [`trainer`]: byte corpus, batching, Adam, evaluation and checkpoints.
//! * [`bench`]: runtime scaling of the two mixing kernels.
//! * [`checks`]: the geometry, gradient and causality property suites.

pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod checks;
mod error;
pub mod geometry;
pub mod model;
pub mod params;
pub mod trainer;
mod tensor;

pub use autodiff::{grad_check, relative_error, Activation, BinaryOp, CustomOp, GradCheck, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};

#[cfg(test)]
mod testutil;
