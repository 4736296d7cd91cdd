//! Differentiable multi-resolution network topology search, desk scale.
//!
//! The crate relaxes a layered multi-resolution topology space into
//! per-edge/per-pattern probabilities, trains a weight-sharing supernet on a
//! synthetic 2D segmentation task, regularizes the relaxation toward
//! feasible, binarized, memory-budgeted architectures, and decodes the final
//! discrete topology with a shortest-path solve that guarantees feasibility.

pub mod arch_loss;
pub mod decode;
pub mod engine;
pub mod error;
pub mod relax;
pub mod space;
pub mod supernet;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
