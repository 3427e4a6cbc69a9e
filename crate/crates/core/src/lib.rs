//! Koopman-von Neumann Langevin molecular dynamics on a discretized
//! one-dimensional phase-space grid.
//!
//! A classical density `rho(R, P)` is carried as `|psi(R, P)|^2` on a
//! [`grid::PhaseSpaceGrid`]. [`propagator`] applies the three-block Langevin
//! update (Liouville flow, momentum friction, cosine diffusion filter),
//! [`diagnostics`] follows relaxation toward the canonical state, [`vdos`]
//! reads out vibrational spectra by simulated phase estimation and [`tst`]
//! evaluates transition-state rates from the canonical state. [`oracles`]
//! holds the particle-level reference integrators and samplers.
//!
//! Everything runs in atomic units; [`units`] converts at the boundary.

pub mod diagnostics;
pub mod electronic;
pub mod error;
pub mod grid;
pub mod oracles;
mod par;
pub mod propagator;
pub mod tst;
pub mod units;
pub mod vdos;

pub use electronic::PesModel;
pub use error::{Error, Result};
pub use grid::{Basis, KvnState, PhaseSpaceGrid};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
