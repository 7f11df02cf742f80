//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes; calling
//! [`Graph::backward`] on a one-element output replays the tape in reverse.
//! [`ParamStore`] holds named parameters across steps and [`Session`] binds
//! them onto a fresh graph for each forward pass. [`gradcheck`] verifies the
//! analytic gradients against central finite differences.
//!
//! Training runs in `f32`; gradient checks run in `f64`.

pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod ops;
pub mod params;
pub mod ptns;
pub mod scalar;
pub mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use graph::{BinaryOp, Gradients, Graph, UnaryOp, Var};
pub use ops::elementwise::Operand;
pub use ops::nn::{BatchNormMode, BatchNormStats, IGNORE_LABEL};
pub use params::{ParamStore, Session};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
