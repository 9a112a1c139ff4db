//! Hierarchical candidate pruning for detector-free feature matching.
//!
//! The crate is `no_std` (with `alloc`) and carries every algorithmic piece of
//! the matcher: a small reverse-mode tape, the two-scale toy encoder,
//! masked linear attention, self-pruning and differentiable interactive
//! candidate selection, dual-softmax matching with sub-pixel refinement,
//! geometric supervision, the loss stack, the synthetic pair generator,
//! homography evaluation and analytic FLOP accounting.
//!
//! IO, configuration files and the command line live in the `hcpm` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod homography;
pub mod losses;
pub mod matching;
pub mod math;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pruning;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
