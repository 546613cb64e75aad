//! Dense tensors, small symmetric solves and a reverse-mode tape.

pub mod gradcheck;
pub mod linalg;
mod tape;
pub mod tensor;

pub use linalg::{damped_inverse, damped_solve, Cholesky};
pub use tape::{Gradients, Tape, Unary, Var};
pub use tensor::{matmul, Tensor};
