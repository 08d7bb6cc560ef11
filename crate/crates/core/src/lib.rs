//! Core algorithms for language-conditioned 4D semantic occupancy generation.
//!
//! Everything here is pure computation over in-memory values and builds
//! without `std`; file formats, the training driver, HTTP and the CLI live
//! in the `occdir` companion crate.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod params;

pub mod backbone;
pub mod codec;
pub mod corpus;
pub mod flow;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod text;

pub use grid::{GridSpec, SemanticGrid};
pub use tensor::{Graph, Tensor, TensorError, Var};
