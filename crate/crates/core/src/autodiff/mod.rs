//! Minimal reverse-mode automatic differentiation.
//!
//! Values are dense row-major `f64` arrays ([`Tensor`]). Operations on a
//! [`Graph`] are evaluated eagerly and recorded on a tape; [`Graph::backward`]
//! replays the tape in reverse. Matrix-shaped ops treat the last dimension as
//! columns and every leading dimension as rows.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use graph::{AttentionSpec, Graph, Var};
pub use tensor::Tensor;

pub(crate) use kernels::softmax_row;
