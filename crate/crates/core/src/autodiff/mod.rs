//! Tensor operations with reverse-mode differentiation.
//!
//! Forward computations are recorded on a [`Tape`] as they run; each
//! [`Var`] is a handle to a recorded value. [`Tape::backward`] walks the
//! record once in reverse and returns leaf gradients.

pub mod kernels;
mod ops;
mod tape;

pub use ops::BatchStats;
pub use tape::{sigmoid, Activation, Gradients, Tape, Var};
