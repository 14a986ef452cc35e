//! Neural ternary semiring: learnable ternary operators `[x, y, z]_γ`
//! regularized toward the ternary Γ-semiring axioms, with the training,
//! ranking and axiom-checking machinery around them.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod harness;
pub mod objectives;
pub mod ops;
pub mod regularizers;
pub mod tensor;

pub use error::{NtsError, Result};
pub use tensor::Tensor;
