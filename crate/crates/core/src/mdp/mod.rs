//! Environments: exact tabular MDPs for the theory checks and two small
//! continuous-state simulators for end-to-end runs.

mod pointmass;
mod tabular;
mod toywean;

pub use pointmass::{PointMass, PointMassConfig, PointMassState, PdController};
pub use tabular::{
    action_values, bellman_residual, exact_return, monte_carlo_return, occupancy, policy_reward,
    policy_transition, q_from_v, state_values, Occupancy, TabularMdp, TabularPolicy,
};
pub(crate) use tabular::random_simplex;
pub use toywean::{
    p_hr, p_hyp, p_min_map, p_pulsat, reward_components, ToyWean, ToyWeanConfig, ToyWeanState,
    WeaningClinician, LEVELS, MAX_LEVEL, MIN_LEVEL, WINDOW,
};

use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Generator consumed by environment steps and policies.
pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionSpace {
    /// Integer actions `low..=high`, carried as a single real component.
    Discrete { low: i64, high: i64 },
    Box { dim: usize, low: f64, high: f64 },
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Discrete { .. } => 1,
            ActionSpace::Box { dim, .. } => *dim,
        }
    }

    pub fn n_discrete(&self) -> Option<usize> {
        match self {
            ActionSpace::Discrete { low, high } => Some((high - low + 1) as usize),
            ActionSpace::Box { .. } => None,
        }
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        match *self {
            ActionSpace::Discrete { low, high } => {
                a.len() == 1 && a[0].fract() == 0.0 && a[0] >= low as f64 && a[0] <= high as f64
            }
            ActionSpace::Box { dim, low, high } => a.len() == dim && a.iter().all(|&x| x >= low && x <= high),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvMeta {
    pub name: &'static str,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step<S> {
    pub state: S,
    pub reward: f64,
    pub done: bool,
}

/// A simulator whose step is a pure function of `(state, action, rng)`.
pub trait Env: Sync {
    type State: Clone + Send;

    fn meta(&self) -> EnvMeta;
    fn reset(&self, rng: &mut StreamRng) -> Self::State;
    fn observe(&self, state: &Self::State) -> Vec<f64>;
    fn step(&self, state: &Self::State, action: &[f64], rng: &mut StreamRng) -> Result<Step<Self::State>>;

    /// Recent `(map, hr, pulsat)` history for stability scoring, oldest first.
    fn vitals_window(&self, _state: &Self::State) -> Option<Vec<[f64; 3]>> {
        None
    }
}

/// Maps raw observations to raw actions.
pub trait Actor: Sync {
    fn act(&self, obs: &[f64], rng: &mut StreamRng) -> Vec<f64>;
}

impl<F> Actor for F
where
    F: Fn(&[f64], &mut StreamRng) -> Vec<f64> + Sync,
{
    fn act(&self, obs: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        self(obs, rng)
    }
}

/// Rounds to the nearest `f32`; observations are stored at single precision.
pub(crate) fn quantize(x: f64) -> f64 {
    x as f32 as f64
}
