//! Open-system electron dynamics for tight-binding transport: full and
//! partitioned density-matrix propagation, lead dissipation, analytic
//! continuation of sampled observables and a linear-response identity check.

pub mod cli;
pub mod continuation;
pub mod error;
pub mod full_propagator;
pub mod io;
pub mod linalg;
pub mod model;
pub mod partition_dissipation;
pub mod reduced_propagator;
pub mod rg_verifier;

pub use error::{Error, Result};
