//! Optimal noise-canceling control of a four-Majorana braiding gate.
//!
//! The gate is driven by three hybridization energies `Δ_j(t) ∈ [0, 1]`
//! under multiplicative white noise of strength `W`. The noise-averaged
//! density matrix obeys a Lindblad master equation; the gate error is the
//! trace distance between the final state and the ideal braid output.
//!
//! * [`model`]: operators, states, protocols and their constructors.
//! * [`propagator`]: the master-equation generator and propagation.
//! * [`cost`]: trace distance and its gradient.
//! * [`anneal`]: simulated-annealing search over piecewise-constant controls.
//! * [`bangbang`]: the six-switch-time bang-bang ansatz.
//! * [`pontryagin`]: switching functions, verification and refinement.
//! * [`experiments`]: sweeps, regime detection, baselines, histograms and
//!   extrapolation.
//! * [`config`]: the TOML experiment configuration.

pub mod anneal;
pub mod bangbang;
pub mod config;
pub mod cost;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pontryagin;
pub mod propagator;
pub mod simplex;

pub use error::{Error, Result};
pub use model::{ControlVector, NoiseStrength, Protocol, Segment};
