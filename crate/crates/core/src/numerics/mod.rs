//! Dense tensors, reverse-mode differentiation, optimizers, seeded
//! randomness and a finite-difference gradient oracle.

mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod rng;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Bound, Gradients, Graph, NodeId, MASK_LOGIT};
pub use optim::{OptimizerKind, OptimizerState};
pub use rng::RngStream;
pub use tensor::{matmul, DType, Scalar, Tensor};

#[cfg(test)]
mod op_tests;
