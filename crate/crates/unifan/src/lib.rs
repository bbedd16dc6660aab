//! Training engine for classification problems with very large label spaces.
//!
//! The output layer is a uniform fixed-fan-in sparse matrix: every label
//! column holds exactly `s` structural non-zeros, stored as two `s x L`
//! arrays (32-bit source indices and 32-bit weights). This keeps the memory
//! cost at 8 bytes per connection, makes the forward/backward kernels
//! embarrassingly parallel over (instance, label) pairs, and turns connection
//! redistribution into a purely per-column operation.
//!
//! The crate provides:
//!
//! - [`tensor`]: minimal dense row-major matrices, ReLU, dropout, top-k.
//! - [`sparse`]: the uniform sparse matrix, its three kernels, and the
//!   gradient-zero skip path (implicit negative mining).
//! - [`dst`]: magnitude pruning + uniform random regrowth with exact
//!   per-column fan-in conservation.
//! - [`loss`]: one-vs-all squared hinge and binary cross-entropy.
//! - [`model`]: features -> dropout -> optional dense intermediate -> head.
//! - [`optim`]: Adam with moments congruent to the sparse structure, plus
//!   plateau-driven learning-rate halving.
//! - [`metrics`]: precision-at-k and the parameter memory report.
//! - [`data`]: dataset text/blob formats, batching, synthetic generators.
//! - [`mach`]: the label-hashing ensemble baseline expressed as a sparse
//!   matrix multiplication.
//! - [`train`]: the epoch loop tying everything together.

pub mod data;
pub mod dst;
pub mod error;
pub mod loss;
pub mod mach;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod train;
mod wire;

pub use error::{Error, Result};
pub use rng::SplitRng;
pub use tensor::{DenseMatrix, Scalar};
