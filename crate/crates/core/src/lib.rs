//! Exact predictive geometry of endpoint-constrained random walks on the
//! square lattice, a from-scratch decoder-only transformer trained on their
//! prefix distributions, and weighted representational-alignment metrics
//! comparing the two.

mod binio;
pub mod alignment;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod lattice;
pub mod nn;
pub mod numeric;

pub use error::{Error, Result};
