//! Density-penalized model-based offline reinforcement learning.
//!
//! A dynamics ensemble learned from logged transitions generates short
//! synthetic rollouts; each rollout reward is reduced by a saturating penalty
//! that grows as the `(s′, a)` pair falls below a density threshold estimated
//! from the data. The crate contains the estimators, the penalty, the model
//! and policy learners, evaluation metrics, and an exact tabular checker for
//! the conservatism bounds the penalty is designed to provide.

pub mod container;
pub mod data;
pub mod density;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod guardian;
pub mod mdp;
pub mod ood_eval;
pub mod policy;
pub mod rl_eval;
pub mod rng;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use container::Container;
pub use exec::Exec;
pub use rng::SeedStream;
