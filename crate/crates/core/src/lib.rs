//! Truncated-Wigner (pseudoclassical) simulation of the Bose-Hubbard chain
//! with a single dissipated site.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the lattice parameters, the classical Hamiltonian and the
//!   right-hand sides of the (dissipative) equations of motion together with
//!   their linearisation.
//! * [`integrator`] propagates trajectories and tangent vectors with a
//!   fixed-step RK4 scheme.
//! * [`ensembles`] draws initial conditions and runs seeded, order-independent
//!   ensembles of trajectories.
//! * [`chaos`] contains the closed-system diagnostics: Lyapunov exponents,
//!   energy-shell histograms and the nonlinear Bloch-wave catalog.
//! * [`stochastic`] is the single-site reduction driven by complex
//!   Ornstein-Uhlenbeck noise.
//! * [`observables`] turns ensemble output into depletion counts, bath
//!   correlation times and depletion-front exponents.
//! * [`experiments`] wires everything into named presets used by the CLI.

// negated comparisons are deliberate: they reject NaN along with bad values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chaos;
pub mod ensembles;
pub mod experiments;
pub mod integrator;
pub mod model;
pub mod observables;
pub mod rng;
pub mod stats;
pub mod stochastic;

pub use num_complex::Complex64;

pub use chaos::{BlochWave, LyapunovConfig, LyapunovResult, ShellHistogram};
pub use ensembles::{EnsembleConfig, EnsembleError, Sampler};
pub use integrator::{IntegratorConfig, IntegratorError, Storage, TrajectoryRecord};
pub use model::{Boundary, LatticeConfig, ModelError, TangentState, TrajectoryState};
pub use observables::{CorrelationEstimate, EnsembleResult, FrontFit};
pub use stochastic::{OUProcessConfig, SingleSiteConfig};
