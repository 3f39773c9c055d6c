//! Spectral simulator for truncated Gross–Pitaevskii hierarchies on a periodic torus.
//!
//! The crate is `no_std` (with `alloc`). Marginals are stored either as dense
//! rank-`2k` tensors ([`Marginal`]) or as finite sums of product kernels
//! ([`FactoredMarginal`]); [`Level`] unifies the two. Truncated hierarchies are
//! solved top-down by a Volterra march ([`solver`]) and cross-checked by an
//! integrating-factor RK4 integrator, an iterated Duhamel expansion and a
//! split-step NLS reference. [`analysis`] holds the estimate studies.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod ensemble;
pub mod error;
pub mod factored;
pub mod grid;
pub mod marginal;
pub mod math;
pub mod nls;
pub mod operators;
pub mod quadrature;
pub mod solver;
pub mod state;

pub use error::{Error, Result};

pub use factored::{FactoredMarginal, ProductTerm};
pub use operators::{admissible_alpha_range, AlphaRange, InteractionSpec};
pub use quadrature::{LinearSpace, Quadrature, RunningIntegral};
pub use nls::{nls_solve, WaveFunction};
pub use solver::{solve_oracle, solve_truncated, TimeGrid, Trajectory};
pub use state::{HierarchyState, Level, NormParams};
pub use grid::{make_grid, phase_weights, sobolev_weights, transform, Direction, Side, TorusGrid};
pub use marginal::{factorized_marginal, validate_marginal, Basis, Marginal, Tolerances, ValidationReport};






pub use num_complex::Complex64;
