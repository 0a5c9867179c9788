//! Numerical laboratory for mixed local/nonlocal diffusion and its
//! homogenization limit.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`] builds grids and the partition families `A_n ∪ B_n`.
//! * [`kernel`] turns a jump kernel into a symmetric, row-normalized matrix.
//! * [`coupled`] integrates the pre-limit equation driven by `L_n`.
//! * [`limit`] integrates the two-density limit system for `(a, b)`.
//! * [`particle`] simulates the underlying processes and compares them
//!   with the solver densities.
//! * [`homogenize`] runs convergence sweeps against a test-function
//!   dictionary.
//! * [`config`], [`export`] and [`cli`] form the batch front end.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod coupled;
pub mod error;
pub mod export;
pub mod field;
pub mod geometry;
pub mod homogenize;
pub mod kernel;
pub mod limit;
pub mod particle;
pub mod timestep;

pub use error::{Error, ErrorCategory, Result};
pub use field::Field;
pub use geometry::{Grid, Partition, PartitionFamily, Point};
pub use kernel::{DiscreteKernel, KernelFamily, KernelSpec};
