//! Finite expression search for PDEs.
//!
//! Candidate solutions are closed-form expressions over a fixed tree whose
//! operators are chosen by a policy-gradient controller and whose continuous
//! parameters are fitted to a least-squares PDE residual.

pub mod controller;
pub mod error;
pub mod expr;
pub mod geometry;
pub mod problems;
pub mod search;
pub mod tuner;

pub use error::{FexError, Result};
