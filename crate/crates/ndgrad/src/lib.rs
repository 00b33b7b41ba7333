//! Dense N-dimensional arrays with reverse-mode differentiation.
//!
//! Everything here is deliberately small: row-major `Array<T>` values,
//! a single-writer `Tape` that records primitive ops, and `Var<T>` handles
//! that compose into networks. Two element types are supported: `f64` for
//! property tests and oracles, `f32` for training.

pub mod array;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tape;

pub use array::Array;
pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::{Dtype, Scalar};
pub use tape::{Gradients, Tape, Var};
