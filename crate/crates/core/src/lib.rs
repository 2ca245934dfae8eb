//! Spatial transport optimization on 2-D grid distributions.
//!
//! Attention maps are modelled as nonnegative `P x P` grids. A source map is
//! pushed toward a target placed relative to a reference map's centroid by
//! descending an entropic optimal-transport loss whose cost penalizes the
//! wrong side of the reference and overlap with it.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod cost;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod ot;
pub mod sim;
pub mod sto;

pub use error::{Error, Result};
