//! Regularized marginalized importance sampling for tabular MDPs.
//!
//! Exact solvers for values, occupancies and their density ratios, the
//! closed-form saddle points of the regularized Lagrangians, seeded offline
//! data generation, linear-class estimators solved as one equality-constrained
//! least-squares problem, return estimators, and the replicate harness that
//! produces the experiment tables.

pub mod error;
pub mod estimators;
pub mod experiments;
pub mod features;
pub mod gridwalk;
pub mod mdp;
pub mod numerics;
pub mod ope;
pub mod regularizers;
pub mod saddle;
pub mod sampling;

pub use error::{Error, Result};
