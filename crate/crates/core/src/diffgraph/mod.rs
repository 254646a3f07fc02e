//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Only the handful of primitives the residual network and the penalized
//! rollout need are provided. A [`Tape`] is built per evaluation and thrown
//! away afterwards.

mod array;
mod tape;

pub use array::Array;
pub use tape::{Gradients, Tape, Var};
