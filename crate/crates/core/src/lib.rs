//! Differentiable cell-based architecture search with strength-proportional
//! channel allocation.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine
//! ([`tape`]), the operation catalog and cell topology ([`space`], [`ops`]),
//! the weight-sharing super-net ([`supernet`]) trained by alternating
//! first-order updates ([`search`]), derivation of a discrete genotype with
//! inherited strengths and channel allocation ([`genotype`], [`allocation`]),
//! and the derived target network ([`targetnet`]).

pub mod allocation;
pub mod checkpoint;
pub mod data;
pub mod dot;
pub mod error;
pub mod genotype;
pub mod kernels;
pub mod ops;
pub mod params;
pub mod search;
pub mod seed;
pub mod space;
pub mod supernet;
pub mod tape;
pub mod targetnet;
pub mod tensor;

pub use error::{Error, Result};
pub use kernels::softmax;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
