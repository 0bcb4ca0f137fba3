//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation as an append-only node list. Values are
//! computed eagerly; [`Graph::backward`] replays the list in reverse. Model
//! parameters live outside any graph as [`Param`]s and are bound into a fresh
//! graph for each forward pass.

mod array;
mod graph;
mod optim;

pub use array::Array;
pub use graph::{Graph, Tensor, PHASE_GUARD};
pub use optim::{opt_step, OptimizerKind, OptimizerState, Param};
