//! Dense `f64` tensors with reverse-mode gradients.
//!
//! A [`Graph`] records operations on [`Var`] handles; [`Graph::backward`]
//! returns gradients for every leaf created with [`Graph::param`].
//! The fused attention kernels ([`Graph::vector_attention`],
//! [`Graph::scalar_attention`]) compute the same values as their primitive
//! compositions while keeping only the attention weights for backward.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_subset, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::Relation;
pub use tensor::{numel, Tensor};
