//! Simulation and statistical inference for W-state preparation on
//! frustrated Rydberg rings.
//!
//! The crate covers the whole pipeline: ring geometries and pulse
//! schedules, the Rydberg Hamiltonian and the kink basis, closed and
//! dephasing dynamics, protocol optimisation, bit-string measurement
//! models, and the Bayesian reweighting that turns shot data into a
//! fidelity estimate.

pub mod basis;
pub mod dynamics;
pub mod error;
pub mod hamiltonian;
pub mod hardware;
pub mod inference;
pub mod lattice;
pub mod linalg;
pub mod measurement;
pub mod observables;
pub mod pulse;
pub mod rng;
pub mod search;
pub mod spectrum;
pub mod state;

pub use error::{Error, Result};
