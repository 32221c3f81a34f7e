//! Closed-loop discovery of sparse symbolic ODE models from trajectory data.
//!
//! The pipeline fits a baseline sparse-regression model over a broad feature
//! dictionary, then iteratively refines the equation structure with candidate
//! templates from a pluggable proposer (remote LLM, scripted replay, or
//! seeded mutation), selecting by simulation-rollout accuracy, parsimony and
//! prior consistency.

pub mod characterize;
pub mod grammar;
pub mod num_serde;
pub mod refine;
pub mod regress;
pub mod simulate;
pub(crate) mod par;
pub mod propose;

pub use grammar::{Expr, GrammarError};
pub use par::with_jobs;
