//! Time-split linear MPC.
//!
//! The finite-horizon problem is cut along the horizon into one subproblem per
//! stage. Neighbouring stages share a consensus state, the equality between the
//! local copies is relaxed to a band, and every subproblem is solved by an
//! accelerated dual gradient method whose iteration count is fixed in advance
//! from a tightening ledger. The consolidated input sequence is then feasible
//! for the original problem.

#![allow(clippy::needless_range_loop)]

pub mod control;
pub mod dfg;
mod error;
pub mod linalg;
mod lp;
pub mod model;
pub mod oracle;
pub mod scenario;
pub mod split;
pub mod tighten;

pub use error::{Error, Result};

pub type Mat = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
