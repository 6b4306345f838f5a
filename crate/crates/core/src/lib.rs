//! Classical emulation of a quantum convolutional neural network.
//!
//! The convolution is computed exactly and then degraded the way the quantum
//! subroutines would degrade it: Gaussian inner-product error, a capped ReLU,
//! and sampling of output entries in proportion to their value. Backpropagation
//! only reaches sampled entries and the kernel gradient carries relative noise.

pub mod data;
pub mod emulation;
pub mod error;
pub mod harness;
pub mod net;
pub mod rng;
pub mod runtime;
pub mod sampling_tree;
pub mod tensor;
pub mod tomography;

pub use error::{QcnnError, Result};
