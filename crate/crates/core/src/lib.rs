//! Complex activity detection over video snippet features.
//!
//! The pipeline runs in two stages. Each snippet becomes a small scene graph
//! (one scene node plus one node per agent tube) that a stack of multi-head
//! graph-attention layers reduces to a single scene vector. The per-snippet
//! vectors are then laid out along a fixed-length temporal graph, passed
//! through three 1D convolutions and decoded into scored, class-labelled
//! segments using pre-defined anchor masks.
//!
//! Everything is differentiable through the small reverse-mode engine in
//! [`autodiff`], so the whole model trains end to end with [`training`].
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! thread pools live in the `compad` companion crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod evaluation;
pub mod model;
pub mod scene_graph;
pub mod synth;
pub mod temporal;
pub mod training;

mod error;
mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
