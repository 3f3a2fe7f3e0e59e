//! Koopman spectra of chained cascaded dynamical systems.
//!
//! The crate builds lower block-triangular linear cascades, computes the
//! initial-condition perturbation map that makes the coupled system
//! asymptotically equivalent to its decoupled nominal system, and verifies
//! the resulting error bounds and eigenfunction identities numerically.
//! Nonlinear cascades are handled through an explicit topological conjugacy.

pub mod cascade;
pub mod conjugacy;
pub mod error;
pub mod experiments;
pub mod numerics;
pub mod observables;
pub mod orbit;
pub mod perturbation;

pub use cascade::{CascadeSystem, ConditionReport, StateVector};
pub use error::{Error, Result};
pub use numerics::{CMatrix, CVector, EigDecomposition};
pub use perturbation::PerturbationData;
