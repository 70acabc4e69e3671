//! Minimal reverse-mode differentiable compute core.
//!
//! A [`Graph`] is a fixed, acyclic list of operators over [`Array4`]
//! tensors. [`Graph::forward`] executes it and returns a [`Tape`]; replaying
//! the tape with [`Tape::backward`] yields gradients for every parameter and
//! every graph input. The tape is consumed by the backward pass.

mod array;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod loss;
mod optim;
mod params;

pub use array::{Array4, Real};
pub use graph::{kaiming_std, GradRequest, Gradients, Graph, Mode, NodeId, OpKind, OpNode, ParamSpec, Tape};
pub use loss::{softmax_cross_entropy, weighted_bce, BceOutput, PROB_EPS};
pub use optim::SgdState;
pub use params::{Param, ParamStore, MAGIC as PARAM_MAGIC};
