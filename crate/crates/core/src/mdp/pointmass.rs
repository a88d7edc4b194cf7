use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{quantize, ActionSpace, Actor, Env, EnvMeta, Step, StreamRng};
use crate::error::Result;

/// Planar double integrator driven toward a goal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMassConfig {
    pub dt: f64,
    pub noise: f64,
    pub horizon: usize,
    pub goal: [f64; 2],
    pub position_bound: f64,
    pub velocity_bound: f64,
    pub action_cost: f64,
    pub start: [f64; 2],
    pub start_spread: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            noise: 0.01,
            horizon: 200,
            goal: [1.0, 1.0],
            position_bound: 2.0,
            velocity_bound: 2.0,
            action_cost: 0.01,
            start: [-1.0, -1.0],
            start_spread: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMassState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub t: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PointMass {
    pub config: PointMassConfig,
}

impl PointMass {
    pub fn new(config: PointMassConfig) -> Self {
        Self { config }
    }
}

impl Env for PointMass {
    type State = PointMassState;

    fn meta(&self) -> EnvMeta {
        EnvMeta {
            name: "pointmass",
            obs_dim: 4,
            action_space: ActionSpace::Box {
                dim: 2,
                low: -1.0,
                high: 1.0,
            },
            horizon: self.config.horizon,
        }
    }

    fn reset(&self, rng: &mut StreamRng) -> PointMassState {
        let c = &self.config;
        let mut p = [0.0; 2];
        for (i, pi) in p.iter_mut().enumerate() {
            *pi = quantize(c.start[i] + c.start_spread * rng.random_range(-1.0..=1.0));
        }
        PointMassState {
            position: p,
            velocity: [0.0; 2],
            t: 0,
        }
    }

    fn observe(&self, s: &PointMassState) -> Vec<f64> {
        vec![s.position[0], s.position[1], s.velocity[0], s.velocity[1]]
    }

    /// Explicit Euler: the position advances by the current velocity, then the
    /// velocity integrates the clipped action plus noise.
    fn step(&self, s: &PointMassState, action: &[f64], rng: &mut StreamRng) -> Result<Step<PointMassState>> {
        let c = &self.config;
        let a = [
            action.first().copied().unwrap_or(0.0).clamp(-1.0, 1.0),
            action.get(1).copied().unwrap_or(0.0).clamp(-1.0, 1.0),
        ];
        let dist = ((s.position[0] - c.goal[0]).powi(2) + (s.position[1] - c.goal[1]).powi(2)).sqrt();
        let reward = -dist - c.action_cost * (a[0] * a[0] + a[1] * a[1]);
        let mut next = *s;
        for (i, ai) in a.into_iter().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            next.position[i] = quantize((s.position[i] + c.dt * s.velocity[i]).clamp(-c.position_bound, c.position_bound));
            next.velocity[i] =
                quantize((s.velocity[i] + c.dt * ai + c.noise * z).clamp(-c.velocity_bound, c.velocity_bound));
        }
        next.t = s.t + 1;
        Ok(Step {
            state: next,
            reward,
            done: next.t >= c.horizon,
        })
    }
}

/// Proportional-derivative controller toward the goal with Gaussian exploration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdController {
    pub kp: f64,
    pub kd: f64,
    pub noise: f64,
    pub goal: [f64; 2],
}

impl Default for PdController {
    fn default() -> Self {
        Self {
            kp: 1.0,
            kd: 1.5,
            noise: 0.3,
            goal: [1.0, 1.0],
        }
    }
}

impl Actor for PdController {
    fn act(&self, obs: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        (0..2)
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                let u = self.kp * (self.goal[i] - obs[i]) - self.kd * obs[2 + i] + self.noise * z;
                quantize(u.clamp(-1.0, 1.0))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn noiseless() -> PointMass {
        PointMass::new(PointMassConfig {
            noise: 0.0,
            ..PointMassConfig::default()
        })
    }

    #[test]
    fn at_goal_at_rest_has_zero_reward() {
        let env = noiseless();
        let s = PointMassState {
            position: env.config.goal,
            velocity: [0.0; 2],
            t: 0,
        };
        let step = env.step(&s, &[0.0, 0.0], &mut SeedStream::new(0).rng()).unwrap();
        assert_eq!(step.reward, 0.0);
        assert_eq!(step.state.position, env.config.goal);
    }

    #[test]
    fn zero_action_advances_position_by_velocity() {
        let env = noiseless();
        let s = PointMassState {
            position: [0.25, -0.5],
            velocity: [0.5, 1.0],
            t: 0,
        };
        let next = env.step(&s, &[0.0, 0.0], &mut SeedStream::new(0).rng()).unwrap().state;
        assert!((next.position[0] - 0.3).abs() < 1e-6);
        assert!((next.position[1] + 0.4).abs() < 1e-6);
        assert_eq!(next.velocity, s.velocity);
    }

    #[test]
    fn seeded_runs_replay() {
        let env = PointMass::default();
        let pd = PdController::default();
        let run = || {
            let mut rng = SeedStream::new(11).rng();
            let mut s = env.reset(&mut rng);
            let mut out = vec![];
            loop {
                let a = pd.act(&env.observe(&s), &mut rng);
                let step = env.step(&s, &a, &mut rng).unwrap();
                out.push(step.reward);
                s = step.state;
                if step.done {
                    break;
                }
            }
            out
        };
        let a = run();
        assert_eq!(a.len(), 200);
        assert_eq!(a, run());
    }
}
