//! Deep penalty method for finite-horizon optimal stopping.
//!
//! The value of an optimal stopping problem is approximated by penalizing the
//! obstacle constraint, rewriting the penalized PDE as a BSDE and training a
//! single spatio-temporal network for its `Z` component inside a forward Euler
//! rollout. A one-dimensional finite-difference solver for the reduced
//! geometric-index put serves as the accuracy oracle.
//!
//! Module map:
//!
//! * [`diffgraph`] – reverse-mode differentiation over dense batched arrays.
//! * [`network`] – the residual network `Z(t, x | θ)` and its parameters.
//! * [`dynamics`] – problem definitions and the Euler–Maruyama simulator.
//! * [`penalty_bsde`] – transformed problem, forward rollout, losses.
//! * [`trainer`] – Adam, plateau scheduling, the training loop and metrics.
//! * [`fd`] – finite-difference and binomial oracles for the reduced problem.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffgraph;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod fd;
pub mod network;
pub mod penalty_bsde;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
