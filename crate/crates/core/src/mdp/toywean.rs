//! Toy weaning task: three hemodynamic signals respond to a discrete pump
//! support level in `2..=9`.
//!
//! Each signal relaxes toward a level-dependent set point,
//! `x' = x + k (x*(a) − x) + noise`. Lowering support by `Δ` levels also
//! applies an immediate MAP drop proportional to `Δ²` (and an HR rise), so a
//! drop of three or more levels usually pushes MAP below 60.
//!
//! Observations are `[map, hr, pulsat, flow]`, where flow is a noisy reading
//! of the current support level. The level itself is not observed, which
//! keeps the `(s′, a)` density non-degenerate.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{quantize, ActionSpace, Actor, Env, EnvMeta, Step, StreamRng};
use crate::error::{param, Result};

pub const MIN_LEVEL: u8 = 2;
pub const MAX_LEVEL: u8 = 9;
pub const LEVELS: usize = (MAX_LEVEL - MIN_LEVEL + 1) as usize;
pub const WINDOW: usize = 6;

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn p_hr(hr_min: f64) -> f64 {
    relu((hr_min - 75.0).powi(2) / 250.0 - 1.0)
}

pub fn p_min_map(map_min: f64) -> f64 {
    relu(7.0 * (60.0 - map_min) / 20.0)
}

pub fn p_pulsat(pulsat_min: f64) -> f64 {
    relu(7.0 * (20.0 - pulsat_min) / 20.0) + relu((pulsat_min - 50.0) / 20.0)
}

pub fn p_hyp(map_mean: f64) -> f64 {
    relu((map_mean - 106.0) / 18.0)
}

/// Unnormalized reward: the negated sum of the four penalty components.
pub fn reward_components(map_min: f64, map_mean: f64, hr_min: f64, pulsat_min: f64) -> f64 {
    -(p_min_map(map_min) + p_hyp(map_mean) + p_hr(hr_min) + p_pulsat(pulsat_min))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyWeanConfig {
    pub gain: f64,
    pub map_base: f64,
    pub map_per_level: f64,
    pub hr_base: f64,
    pub hr_per_level: f64,
    pub pulsat_base: f64,
    pub pulsat_per_level: f64,
    /// MAP drop per squared level decrease.
    pub map_shock: f64,
    /// HR rise per squared level decrease.
    pub hr_shock: f64,
    pub map_noise: f64,
    pub hr_noise: f64,
    pub pulsat_noise: f64,
    pub flow_per_level: f64,
    pub flow_noise: f64,
    pub horizon: usize,
    pub init_level_min: u8,
    pub init_level_max: u8,
}

impl Default for ToyWeanConfig {
    fn default() -> Self {
        Self {
            gain: 0.3,
            map_base: 58.0,
            map_per_level: 3.5,
            hr_base: 95.0,
            hr_per_level: -2.0,
            pulsat_base: 10.0,
            pulsat_per_level: 3.0,
            map_shock: 3.5,
            hr_shock: 1.0,
            map_noise: 1.0,
            hr_noise: 1.0,
            pulsat_noise: 0.8,
            flow_per_level: 0.5,
            flow_noise: 0.1,
            horizon: 36,
            init_level_min: 7,
            init_level_max: 9,
        }
    }
}

impl ToyWeanConfig {
    pub fn noiseless() -> Self {
        Self {
            map_noise: 0.0,
            hr_noise: 0.0,
            pulsat_noise: 0.0,
            flow_noise: 0.0,
            ..Self::default()
        }
    }

    /// Set point `(map, hr, pulsat)` of the linear dynamics at a fixed level.
    pub fn fixed_point(&self, level: u8) -> [f64; 3] {
        let l = level as f64;
        [
            self.map_base + self.map_per_level * l,
            self.hr_base + self.hr_per_level * l,
            self.pulsat_base + self.pulsat_per_level * l,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeanState {
    pub map: f64,
    pub hr: f64,
    pub pulsat: f64,
    pub flow: f64,
    pub level: u8,
    /// Last six `(map, hr, pulsat)` observations, oldest first.
    pub window: VecDeque<[f64; 3]>,
    pub t: usize,
}

impl ToyWeanState {
    /// Reward inputs `(map_min, map_mean, hr_min, pulsat_min)` over the window.
    pub fn window_summary(&self) -> (f64, f64, f64, f64) {
        let n = self.window.len() as f64;
        let map_min = self.window.iter().map(|w| w[0]).fold(f64::INFINITY, f64::min);
        let map_mean = self.window.iter().map(|w| w[0]).sum::<f64>() / n;
        let hr_min = self.window.iter().map(|w| w[1]).fold(f64::INFINITY, f64::min);
        let pulsat_min = self.window.iter().map(|w| w[2]).fold(f64::INFINITY, f64::min);
        (map_min, map_mean, hr_min, pulsat_min)
    }

    pub fn window_array(&self) -> Vec<[f64; 3]> {
        self.window.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ToyWean {
    pub config: ToyWeanConfig,
}

impl ToyWean {
    pub fn new(config: ToyWeanConfig) -> Self {
        Self { config }
    }

    pub fn level_of(action: &[f64]) -> Result<u8> {
        match action {
            [a] if a.fract() == 0.0 && *a >= MIN_LEVEL as f64 && *a <= MAX_LEVEL as f64 => Ok(*a as u8),
            _ => param(format!("ToyWean action {action:?} is not a level in {MIN_LEVEL}..={MAX_LEVEL}")),
        }
    }

    fn advance(&self, s: &ToyWeanState, level: u8, rng: &mut StreamRng) -> ToyWeanState {
        let c = &self.config;
        let [map_t, hr_t, pulsat_t] = c.fixed_point(level);
        let drop = (s.level as f64 - level as f64).max(0.0);
        let n = |rng: &mut StreamRng, sd: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        };
        let map = s.map + c.gain * (map_t - s.map) - c.map_shock * drop * drop + n(rng, c.map_noise);
        let hr = s.hr + c.gain * (hr_t - s.hr) + c.hr_shock * drop * drop + n(rng, c.hr_noise);
        let pulsat = s.pulsat + c.gain * (pulsat_t - s.pulsat) + n(rng, c.pulsat_noise);
        let flow = c.flow_per_level * level as f64 + n(rng, c.flow_noise);
        let (map, hr, pulsat, flow) = (quantize(map), quantize(hr), quantize(pulsat), quantize(flow));
        let mut window = s.window.clone();
        window.push_back([map, hr, pulsat]);
        while window.len() > WINDOW {
            window.pop_front();
        }
        ToyWeanState {
            map,
            hr,
            pulsat,
            flow,
            level,
            window,
            t: s.t + 1,
        }
    }
}

impl Env for ToyWean {
    type State = ToyWeanState;

    fn meta(&self) -> EnvMeta {
        EnvMeta {
            name: "toywean",
            obs_dim: 4,
            action_space: ActionSpace::Discrete {
                low: MIN_LEVEL as i64,
                high: MAX_LEVEL as i64,
            },
            horizon: self.config.horizon,
        }
    }

    /// Starts at a random high level and runs six warm-up steps to fill the window.
    fn reset(&self, rng: &mut StreamRng) -> ToyWeanState {
        let c = &self.config;
        let level = rng.random_range(c.init_level_min..=c.init_level_max);
        let [map, hr, pulsat] = c.fixed_point(level);
        let mut s = ToyWeanState {
            map,
            hr,
            pulsat,
            flow: c.flow_per_level * level as f64,
            level,
            window: VecDeque::with_capacity(WINDOW + 1),
            t: 0,
        };
        for _ in 0..WINDOW {
            s = self.advance(&s, level, rng);
        }
        s.t = 0;
        s
    }

    fn observe(&self, s: &ToyWeanState) -> Vec<f64> {
        vec![s.map, s.hr, s.pulsat, s.flow]
    }

    fn vitals_window(&self, s: &ToyWeanState) -> Option<Vec<[f64; 3]>> {
        Some(s.window_array())
    }

    fn step(&self, s: &ToyWeanState, action: &[f64], rng: &mut StreamRng) -> Result<Step<ToyWeanState>> {
        let level = Self::level_of(action)?;
        let next = self.advance(s, level, rng);
        let (map_min, map_mean, hr_min, pulsat_min) = next.window_summary();
        let reward = reward_components(map_min, map_mean, hr_min, pulsat_min);
        let done = next.t >= self.config.horizon;
        Ok(Step {
            state: next,
            reward,
            done,
        })
    }
}

/// Scripted behavior policy: weans one level at a time while MAP is comfortable,
/// occasionally drops two, escalates when MAP is low, and explores uniformly
/// with a small probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeaningClinician {
    pub explore: f64,
    pub wean_prob: f64,
    pub double_drop_prob: f64,
    pub escalate_below_map: f64,
    pub wean_above_map: f64,
    pub flow_per_level: f64,
}

impl Default for WeaningClinician {
    fn default() -> Self {
        Self {
            explore: 0.15,
            wean_prob: 0.35,
            double_drop_prob: 0.05,
            escalate_below_map: 63.0,
            wean_above_map: 66.0,
            flow_per_level: 0.5,
        }
    }
}

impl Actor for WeaningClinician {
    fn act(&self, obs: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let est = (obs[3] / self.flow_per_level).round().clamp(MIN_LEVEL as f64, MAX_LEVEL as f64) as i64;
        let level = if rng.random::<f64>() < self.explore {
            rng.random_range(MIN_LEVEL as i64..=MAX_LEVEL as i64)
        } else if obs[0] < self.escalate_below_map {
            est + 1
        } else if obs[0] > self.wean_above_map {
            let u: f64 = rng.random();
            if u < self.double_drop_prob {
                est - 2
            } else if u < self.double_drop_prob + self.wean_prob {
                est - 1
            } else {
                est
            }
        } else {
            est
        };
        vec![level.clamp(MIN_LEVEL as i64, MAX_LEVEL as i64) as f64]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn reward_component_values() {
        assert_eq!(reward_components(70.0, 90.0, 75.0, 35.0), 0.0);
        assert!((p_min_map(40.0) - 7.0).abs() < 1e-12);
        assert!((p_hyp(124.0) - 1.0).abs() < 1e-12);
        assert!((p_hr(100.0) - 1.5).abs() < 1e-12);
        // Zero only on 75 ± sqrt(250), not on the wider range [50, 100].
        assert_eq!(p_hr(60.0), 0.0);
        assert!(p_hr(55.0) > 0.0);
        assert!(p_hr(95.0) > 0.0);
        assert!((p_pulsat(10.0) - 3.5).abs() < 1e-12);
        assert!((p_pulsat(70.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn converges_to_fixed_point_without_noise() {
        let env = ToyWean::new(ToyWeanConfig::noiseless());
        let mut rng = SeedStream::new(0).rng();
        let mut s = env.reset(&mut rng);
        for _ in 0..200 {
            // Holding level 9 never triggers a drop shock after the first step.
            s = env.advance(&s, 9, &mut rng);
        }
        let target = env.config.fixed_point(9);
        assert!((s.map - target[0]).abs() < 1e-4);
        assert!((s.hr - target[1]).abs() < 1e-4);
        assert!((s.pulsat - target[2]).abs() < 1e-4);
        assert_eq!(s.window.len(), WINDOW);
    }

    #[test]
    fn horizon_ends_episode_and_replays_match() {
        let env = ToyWean::default();
        let run = |seed| {
            let mut rng = SeedStream::new(seed).rng();
            let mut s = env.reset(&mut rng);
            let mut trace = vec![];
            for t in 0..env.config.horizon {
                let step = env.step(&s, &[6.0], &mut rng).unwrap();
                assert_eq!(step.done, t + 1 == env.config.horizon);
                trace.push((env.observe(&step.state), step.reward));
                s = step.state;
            }
            trace
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn rejects_invalid_levels() {
        let env = ToyWean::default();
        let mut rng = SeedStream::new(0).rng();
        let s = env.reset(&mut rng);
        for bad in [[1.0], [10.0], [4.5]] {
            assert!(env.step(&s, &bad, &mut rng).is_err());
        }
    }

    #[test]
    fn large_drops_usually_cause_hypotension() {
        let env = ToyWean::default();
        let mut below = 0;
        for seed in 0..200 {
            let mut rng = SeedStream::new(seed).rng();
            let mut s = env.reset(&mut rng);
            let target = s.level.saturating_sub(3).max(MIN_LEVEL);
            s = env.step(&s, &[target as f64], &mut rng).unwrap().state;
            if s.map < 60.0 {
                below += 1;
            }
        }
        assert!(below > 150, "{below}/200 episodes dropped below 60");
    }

    #[test]
    fn gradual_weaning_to_level_two_is_feasible() {
        let env = ToyWean::new(ToyWeanConfig::noiseless());
        let mut rng = SeedStream::new(1).rng();
        let mut s = env.reset(&mut rng);
        let mut min_map = f64::INFINITY;
        for t in 0..env.config.horizon {
            let level = (s.level as i64 - i64::from(t % 4 == 0)).max(MIN_LEVEL as i64);
            s = env.step(&s, &[level as f64], &mut rng).unwrap().state;
            min_map = min_map.min(s.map);
        }
        assert_eq!(s.level, MIN_LEVEL);
        assert!(min_map > 60.0, "{min_map}");
    }
}
