//! Kinetic-theory laboratory for a hard-sphere Rayleigh gas mixture on
//! the unit torus: event-driven microscopic dynamics, grand-canonical
//! sampling of tagged/background mixtures, solvers for the linear
//! Rayleigh-Boltzmann equation, cluster-expansion (cumulant) machinery,
//! collision-tree (Dyson series) Monte Carlo, and ensemble statistics.

pub mod cluster;
pub mod duhamel;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod geom;
pub mod kinetic;
pub mod stats;

pub use error::{Error, Result};
