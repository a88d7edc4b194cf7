//! Policy learning on the model MDP: soft actor-critic, mixed real/model
//! replay, the MBPO loop with an optional density penalty, and λ selection.

mod buffer;
mod mbpo;
mod sac;

pub use buffer::{ModelBuffer, ReplayPair};
pub use mbpo::{gormpo_train, lambda_sweep, select_lambda, EpochLog, MbpoConfig, SacActor, Stochastic, SweepRow, TrainOutcome, LAMBDA_GRID};
pub use sac::{Batch, Head, Sac, SacConfig, UpdateStats};
