//! Dynamic convex risk measures on finite scenario trees.
//!
//! The crate is organized around a small set of exact primitives:
//!
//! - [`probspace`] — scenario trees, filtrations, stopping times, measures
//!   and conditional expectation;
//! - [`riskcore`] — conditional risk measures generated by finite dual
//!   families, axiom checking, acceptance sets and minimal penalties (an
//!   exact per-atom linear program, cross-checked by a brute-force conjugate
//!   oracle);
//! - [`consistency`] — checkers for time consistency, the penalty cocycle
//!   identity, the supermartingale and restriction properties, zero-penalty
//!   measures and risk-process verification;
//! - [`models`] — the entropic measure with threshold families and
//!   discrete-time recursions driven by a convex generator on binomial
//!   trees;
//! - [`stableset`] — pasting-stable measure families with local per-step
//!   penalties and the backward-recursion construction of time-consistent
//!   measures;
//! - [`battery`] — seeded, reproducible test batteries of positions and
//!   sampled measures used by the checkers.
//!
//! Everything is immutable after construction and every operation is pure,
//! so evaluations can run concurrently across positions, measures and atoms.

pub mod battery;
pub mod consistency;
pub mod error;
pub mod models;
pub mod probspace;
pub mod report;
pub mod riskcore;
pub mod stableset;

pub use error::{Error, Result};
pub use probspace::{
    cond_expectation, Measure, RandomVariable, ScenarioTree, StoppingTime, DEFAULT_TOL,
};
pub use riskcore::{DynamicRisk, ExtReal, PenaltyFn, PenaltyRv};
