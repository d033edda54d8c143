//! Small reverse-mode automatic differentiation engine.
//!
//! Every vector-Jacobian product is itself built from recorded operations, so
//! gradients can be differentiated a second time (`grad(.., create_graph =
//! true)`), as the WGAN-GP penalty requires.

mod kernels;
mod scalar;
mod var;

pub mod gradcheck;

pub use kernels::{conv2d, conv2d_transpose, conv2d_weight, ConvGeom};
pub use scalar::Scalar;
pub use var::{grad, is_grad_enabled, no_grad, reduce_to, Var};

#[cfg(test)]
mod tests;
