//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! Operations are recorded on a [`Tape`] as they execute. Each recorded node
//! keeps its forward value and whatever the backward rule needs; calling
//! [`Tape::backward`] on a scalar walks the tape once in reverse insertion
//! order (a valid reverse topological order, since inputs are always
//! recorded before the nodes that consume them) and returns [`Gradients`].
//!
//! Only the operations the scene-graph and temporal networks need are
//! provided. Broadcasting is limited to the explicit bias ops.
//!
//! [`Tensor`]: crate::Tensor

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::grad_check;
pub use ops::{conv1d_forward, masked_softmax_forward, DEFAULT_LEAKY_SLOPE, PROB_CLAMP};
pub use tape::{Gradients, Tape, Var};
