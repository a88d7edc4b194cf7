//! Density penalty on model rollouts.
//!
//! A generated pair `(ŝ′, a)` whose log-density falls below the threshold `τ`
//! has its reward reduced by `λ·u` with `u = tanh(max(τ − log p, 0))`.

use std::io::Write;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{DensityEstimator, LOG_DENSITY_FLOOR};
use crate::dynamics::{DynamicsEnsemble, PredictMode};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// `tanh(max(τ − log p, 0))`: zero at or above the threshold, approaching 1 far below it.
pub fn penalty_u(log_p: f64, tau: f64) -> f64 {
    (tau - log_p).max(0.0).tanh()
}

/// Non-saturating `max(τ − log p, 0)`; ablation only.
pub fn linear_penalty(log_p: f64, tau: f64) -> f64 {
    (tau - log_p).max(0.0)
}

pub fn penalize_reward(r_hat: f64, u: f64, lambda: f64) -> f64 {
    r_hat - lambda * u
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub tau: f64,
    pub lambda: f64,
    #[serde(default = "default_floor")]
    pub underflow_floor: f64,
    /// Replace the tanh penalty by its non-saturating argument.
    #[serde(default)]
    pub linear_ablation: bool,
}

fn default_floor() -> f64 {
    LOG_DENSITY_FLOOR
}

impl PenaltyConfig {
    pub fn new(tau: f64, lambda: f64) -> Result<Self> {
        let c = Self {
            tau,
            lambda,
            underflow_floor: LOG_DENSITY_FLOOR,
            linear_ablation: false,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::Config(format!("threshold tau {} must be finite", self.tau)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        Ok(())
    }

    pub fn u(&self, log_p: f64) -> f64 {
        let lp = log_p.max(self.underflow_floor);
        if self.linear_ablation {
            linear_penalty(lp, self.tau)
        } else {
            penalty_u(lp, self.tau)
        }
    }
}

/// Per-row penalty intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyInfo {
    pub log_p: Array1<f64>,
    pub u: Array1<f64>,
    pub reward: Array1<f64>,
}

/// A fitted, calibrated density estimator paired with a penalty weight.
#[derive(Clone, Copy)]
pub struct Guardian<'a> {
    density: &'a dyn DensityEstimator,
    config: PenaltyConfig,
    exec: Exec,
}

impl std::fmt::Debug for Guardian<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Guardian")
            .field("density", &self.density.kind())
            .field("config", &self.config)
            .finish()
    }
}

impl<'a> Guardian<'a> {
    /// Uses the estimator's calibrated threshold.
    pub fn new(density: &'a dyn DensityEstimator, lambda: f64) -> Result<Self> {
        let tau = density
            .threshold()
            .ok_or_else(|| Error::Config(format!("{} estimator has no calibrated threshold", density.kind())))?;
        Self::with_config(density, PenaltyConfig::new(tau, lambda)?)
    }

    /// Manual threshold override.
    pub fn with_config(density: &'a dyn DensityEstimator, config: PenaltyConfig) -> Result<Self> {
        config.validate()?;
        if !density.is_fitted() {
            return Err(Error::NotFitted(density.kind().name()));
        }
        Ok(Self {
            density,
            config,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &PenaltyConfig {
        &self.config
    }

    pub fn density(&self) -> &'a dyn DensityEstimator {
        self.density
    }

    /// Scores normalized `(ŝ′, a)` and penalizes `r̂`. Draws no randomness.
    pub fn penalize(&self, next_obs: &Array2<f64>, act: &Array2<f64>, r_hat: &Array1<f64>) -> Result<PenaltyInfo> {
        let pairs = concatenate(Axis(1), &[next_obs.view(), act.view()]).expect("same rows");
        let log_p = self.density.log_prob_with(&pairs, self.exec)?;
        let u = log_p.mapv(|lp| self.config.u(lp));
        let reward = Array1::from_shape_fn(r_hat.len(), |i| penalize_reward(r_hat[i], u[i], self.config.lambda));
        Ok(PenaltyInfo { log_p, u, reward })
    }
}

/// One batched model step in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStep {
    pub next_obs: Array2<f64>,
    /// `r̃` with a guardian, otherwise `r̂`.
    pub reward: Array1<f64>,
    pub model_reward: Array1<f64>,
    pub penalty: Option<PenaltyInfo>,
}

/// The model MDP used for policy learning: ensemble transitions with an
/// optional density penalty on the reward.
#[derive(Debug, Clone, Copy)]
pub struct PenalizedModel<'a> {
    pub ensemble: &'a DynamicsEnsemble,
    pub guardian: Option<Guardian<'a>>,
}

impl<'a> PenalizedModel<'a> {
    pub fn new(ensemble: &'a DynamicsEnsemble, guardian: Option<Guardian<'a>>) -> Result<Self> {
        if let Some(g) = &guardian {
            let want = ensemble.obs_dim() + ensemble.act_dim();
            if g.density.input_dim() != want {
                return Err(Error::Config(format!(
                    "density input width {} does not match obs+action width {want}",
                    g.density.input_dim()
                )));
            }
        }
        Ok(Self { ensemble, guardian })
    }

    /// Samples `ŝ′ ∼ T̂(·|s, a)` and `r̂`, then applies the penalty. The random
    /// stream is consumed identically with and without a guardian.
    pub fn penalized_step(&self, obs: &Array2<f64>, act: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<ModelStep> {
        let pred = self.ensemble.predict(obs, act, PredictMode::Sample, rng)?;
        let penalty = match &self.guardian {
            Some(g) => Some(g.penalize(&pred.next_obs, act, &pred.reward)?),
            None => None,
        };
        Ok(ModelStep {
            reward: penalty.as_ref().map_or_else(|| pred.reward.clone(), |p| p.reward.clone()),
            next_obs: pred.next_obs,
            model_reward: pred.reward,
            penalty,
        })
    }
}

/// One line of the penalty trace log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRecord {
    pub epoch: usize,
    pub u: f64,
    pub log_p: f64,
    pub r_hat: f64,
    pub r_tilde: f64,
}

impl PenaltyRecord {
    pub fn from_step(epoch: usize, step: &ModelStep) -> Vec<Self> {
        let Some(p) = &step.penalty else {
            return Vec::new();
        };
        (0..p.u.len())
            .map(|i| PenaltyRecord {
                epoch,
                u: p.u[i],
                log_p: p.log_p[i],
                r_hat: step.model_reward[i],
                r_tilde: p.reward[i],
            })
            .collect()
    }
}

/// Appends records as JSON lines.
pub fn write_trace(mut out: impl Write, records: &[PenaltyRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(text: &str) -> Result<Vec<PenaltyRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("bad trace line: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty_u(2.0, 2.0), 0.0);
        assert!((penalty_u(-1.0, 0.0) - 0.761594).abs() < 1e-6);
        assert!((penalty_u(-1.0, 0.0) - 1f64.tanh()).abs() < 1e-15);
        let sat = penalty_u(-20.0, 0.0);
        assert!(sat < 1.0 + 1e-15 && 1.0 - sat < 1e-8);
        assert_eq!(penalty_u(5.0, 0.0), 0.0);
    }

    #[test]
    fn reward_examples() {
        assert_eq!(penalize_reward(1.0, 1.0, 0.5), 0.5);
        assert_eq!(penalize_reward(0.7, 0.9, 0.0), 0.7);
        assert!((penalize_reward(0.3, 1f64.tanh(), 0.2) - 0.147681).abs() < 1e-6);
    }

    #[test]
    fn config_validation_and_floor() {
        assert!(PenaltyConfig::new(f64::NAN, 0.1).is_err());
        assert!(PenaltyConfig::new(0.0, -0.1).is_err());
        let c = PenaltyConfig::new(-3.0, 0.4).unwrap();
        assert_eq!(c.u(f64::NEG_INFINITY), c.u(LOG_DENSITY_FLOOR));
        let lin = PenaltyConfig { linear_ablation: true, ..c };
        assert_eq!(lin.u(-5.0), 2.0);
    }

    #[test]
    fn trace_round_trip() {
        let recs = vec![
            PenaltyRecord { epoch: 1, u: 0.25, log_p: -4.0, r_hat: 1.0, r_tilde: 0.9 },
            PenaltyRecord { epoch: 2, u: 0.0, log_p: 3.0, r_hat: -1.0, r_tilde: -1.0 },
        ];
        let mut buf = Vec::new();
        write_trace(&mut buf, &recs).unwrap();
        assert_eq!(read_trace(std::str::from_utf8(&buf).unwrap()).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn bounded_and_one_lipschitz(a in -50.0f64..50.0, b in -50.0f64..50.0, tau in -20.0f64..20.0, r in -10.0f64..10.0, lambda in 0.0f64..2.0) {
            let (ua, ub) = (penalty_u(a, tau), penalty_u(b, tau));
            prop_assert!((0.0..=1.0).contains(&ua));
            prop_assert!((ua - ub).abs() <= (a - b).abs() + 1e-15);
            let rt = penalize_reward(r, ua, lambda);
            prop_assert!(rt <= r && rt >= r - lambda);
        }
    }
}
