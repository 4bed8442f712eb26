//! Optimal sequential decision procedures for finite-parameter, finite-alphabet
//! discrete-time observation processes.
//!
//! The crate computes Bayes terminal decisions, optimal (possibly randomized)
//! stopping rules by backward induction, exact risk functionals by forward
//! recursion, and solves the constrained problem of minimizing the average
//! sample number subject to bounds on group-wise decision losses through
//! Lagrange multipliers. A classical SPRT baseline and a Monte Carlo
//! simulator are included for comparison and cross-checking.

pub mod backward;
pub mod bayes;
pub mod error;
pub mod lagrange;
pub mod lattice;
pub mod model;
pub mod monte_carlo;
pub mod policy;
pub mod risk;
pub mod sprt;

pub use error::{Error, Result};
