//! Finite-dimensional laboratory for non-time-homogeneous generalized Mehler
//! semigroups `p_{s,t} f(x) = ∫ f(U(t,s)x + y) μ_{t,s}(dy)` on `R^d`.
//!
//! The crate computes evolution families, the infinitely divisible triplets of
//! `μ_{t,s}`, evolution systems of measures, Harnack and strong-Feller checks,
//! null-controllability certificates, and a Girsanov-based simulator for
//! semilinear perturbations. Every stochastic check reports a three-valued
//! verdict rather than a bare boolean.

pub mod control;
pub mod error;
pub mod evolution;
pub mod functions;
pub mod harnack;
pub mod kernel;
pub mod linalg;
pub mod measures;
pub mod scenario;
pub mod semilinear;
pub mod stats;
pub mod suite;
pub mod triplet;

pub use error::{MehlerError, Result};
