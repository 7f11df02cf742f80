//! Differentiable operations, grouped by family. Each family adds methods to
//! [`Graph`](crate::Graph) and supplies the matching backward rules.

pub mod elementwise;
pub mod linalg;
pub mod nn;
pub mod shape;
