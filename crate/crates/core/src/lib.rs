//! Spatio-temporal Gaussian-process modelling with SPDE-based sparse
//! precision matrices: operator discretization, precision assembly, optimal
//! interpolation, conditional ensembles and likelihood-based parameter fitting.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod engine;
pub mod ensemble;
pub mod error;
pub mod fit;
pub mod grid;
pub mod operator;
pub mod oracle;
pub mod par;
pub mod params;
pub mod precision;
pub mod sparse;

pub use error::{Error, Result};
pub use grid::{Field, Grid2D, ObsSet, Observation, SpaceTimeField};
pub use sparse::{CholeskyFactor, CsrMatrix, Ordering};
