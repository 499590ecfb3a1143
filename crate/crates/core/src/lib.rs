//! Reward-conditional flow-network sampler for structured action spaces.
//!
//! Structured environment actions are vectors of `N` atomic actions with
//! pairwise local dependencies. This crate models the policy as an
//! energy-based distribution `pi(a|s) ∝ exp(Q_soft(s,a)/alpha)` over that
//! space and trains a state-conditional flow network to sample from it,
//! jointly with the soft-Q energy model itself. Exact enumeration oracles
//! for desk-scale spaces verify that the sampler's terminating distribution
//! matches the Boltzmann target.

pub mod action_space;
pub mod autodiff;
pub mod cli;
pub mod encoder;
pub mod envs;
pub mod error;
pub mod eval;
pub mod gflownet;
pub mod softq;
pub mod trainer;

pub use error::{Error, Result};
