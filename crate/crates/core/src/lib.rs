//! Differentiable belief-based opponent shaping.
//!
//! Observers of a hidden-role agent are modeled as Bayesian filters over the
//! agent's role. Because the filter is written as a softmax over
//! log-likelihoods plus log-prior, the observers' future beliefs are
//! differentiable in the agent's policy parameters, and a belief-conditioned
//! critic turns that into a policy-gradient correction added to PPO.

pub mod error;
pub mod gradcheck;
pub mod bbm;
pub mod bounds;
pub mod belief;
pub mod critic;
pub mod env;
pub mod experiment;
pub mod policy;
pub mod shaping;
pub mod buffer;
pub mod tom;
pub mod trainer;
pub mod tensor;

pub use error::{DbosError, Result};
