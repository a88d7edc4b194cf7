use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{ModelBuffer, ReplayPair};
use super::sac::{Sac, SacConfig, UpdateStats};
use crate::data::{NormStats, OfflineDataset};
use crate::dynamics::{rollout, RolloutBatch, RolloutPolicy};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::guardian::{PenalizedModel, PenaltyRecord};
use crate::mdp::{Actor, Env, StreamRng};
use crate::rl_eval::{evaluate_return, ReturnStats};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MbpoConfig {
    pub sac: SacConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Gradient steps between rollout rounds.
    pub rollout_freq: usize,
    pub rollout_batch: usize,
    pub horizon: usize,
    pub real_ratio: f64,
    /// Model-buffer capacity in rollout rounds.
    pub model_retain_rounds: usize,
    /// Episodes evaluated after each epoch; zero skips.
    pub epoch_eval_episodes: usize,
    /// Episodes evaluated after training; zero skips.
    pub final_eval_episodes: usize,
    /// Keep one penalty record per generated transition.
    pub record_trace: bool,
}

impl Default for MbpoConfig {
    fn default() -> Self {
        Self {
            sac: SacConfig::default(),
            epochs: 100,
            steps_per_epoch: 1000,
            rollout_freq: 1000,
            rollout_batch: 10_000,
            horizon: 5,
            real_ratio: 0.05,
            model_retain_rounds: 5,
            epoch_eval_episodes: 10,
            final_eval_episodes: 1000,
            record_trace: false,
        }
    }
}

impl MbpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("epochs and steps_per_epoch must be positive");
        }
        if self.rollout_freq == 0 || self.rollout_batch == 0 || self.model_retain_rounds == 0 {
            return bad("rollout_freq, rollout_batch and model_retain_rounds must be positive");
        }
        if self.horizon == 0 || self.horizon > u8::MAX as usize {
            return bad("horizon must be in 1..=255");
        }
        if !(0.0..=1.0).contains(&self.real_ratio) {
            return bad("real_ratio must lie in [0, 1]");
        }
        if self.sac.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// Samples from the current policy during model rollouts.
pub struct Stochastic<'a>(pub &'a Sac);

impl RolloutPolicy for Stochastic<'_> {
    fn act_batch(&self, obs: &ndarray::Array2<f64>, rng: &mut rand_chacha::ChaCha8Rng) -> ndarray::Array2<f64> {
        self.0.act(obs, false, rng)
    }
}

/// Acts in an environment on raw observations.
pub struct SacActor<'a> {
    pub sac: &'a Sac,
    pub stats: &'a NormStats,
    pub deterministic: bool,
}

impl Actor for SacActor<'_> {
    fn act(&self, obs: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let z = ndarray::Array2::from_shape_vec((1, obs.len()), self.stats.normalize_obs_row(obs)).expect("one row");
        self.sac.act(&z, self.deterministic, rng).into_raw_vec_and_offset().0
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub q_mean: f64,
    pub q_std: f64,
    /// Mean penalty over this epoch's generated transitions.
    pub mean_u: Option<f64>,
    pub model_reward_mean: Option<f64>,
    pub eval_return: Option<f64>,
    pub eval_std: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub sac: Sac,
    pub log: Vec<EpochLog>,
    pub trace: Vec<PenaltyRecord>,
    pub final_eval: Option<ReturnStats>,
}

fn trace_records(epoch: usize, batch: &RolloutBatch) -> Vec<PenaltyRecord> {
    let (Some(u), Some(lp)) = (&batch.u, &batch.log_p) else {
        return Vec::new();
    };
    (0..batch.len())
        .map(|i| PenaltyRecord {
            epoch,
            u: u[i],
            log_p: lp[i],
            r_hat: batch.model_reward[i],
            r_tilde: batch.reward[i],
        })
        .collect()
}

#[derive(Default)]
struct Running {
    n: usize,
    critic: f64,
    actor: f64,
    entropy: f64,
    q_mean: f64,
    q_std: f64,
}

impl Running {
    fn add(&mut self, s: &UpdateStats) {
        self.n += 1;
        self.critic += s.critic_loss;
        self.actor += s.actor_loss;
        self.entropy += s.entropy;
        self.q_mean += s.q_mean;
        self.q_std += s.q_std;
    }
}

/// Trains SAC on the model MDP. With a guardian attached, generated rewards
/// carry the density penalty; without one this is plain MBPO. The random
/// streams do not depend on the guardian, so λ = 0 reproduces plain MBPO
/// bit for bit.
pub fn gormpo_train<E: Env>(env: &E, data: &OfflineDataset, model: &PenalizedModel<'_>, config: &MbpoConfig, seed: u64, exec: Exec) -> Result<TrainOutcome> {
    config.validate()?;
    let stats = data
        .norm_stats
        .as_ref()
        .filter(|_| data.normalized)
        .ok_or_else(|| Error::Config("policy training expects a normalized dataset".into()))?;
    let meta = env.meta();
    if meta.obs_dim != data.obs_dim() || meta.action_space.dim() != data.act_dim() {
        return Err(Error::Config(format!("dataset shape does not match the {} environment", meta.name)));
    }
    if model.ensemble.obs_dim() != data.obs_dim() || model.ensemble.act_dim() != data.act_dim() {
        return Err(Error::Config("dynamics ensemble shape does not match the dataset".into()));
    }

    let root = SeedStream::new(seed);
    let mut sac = Sac::new(data.obs_dim(), meta.action_space, config.sac.clone(), root.child(0).raw())?;
    let mut rng = root.child(1).rng();
    let capacity = config.rollout_batch * config.horizon * config.model_retain_rounds;
    let mut replay = ReplayPair::new(data, ModelBuffer::new(capacity, data.obs_dim(), data.act_dim()), config.real_ratio)?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut trace = Vec::new();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut run = Running::default();
        let (mut u_sum, mut u_n, mut r_sum, mut r_n) = (0.0, 0usize, 0.0, 0usize);
        for _ in 0..config.steps_per_epoch {
            if step % config.rollout_freq == 0 {
                let mut rrng = root.path(&[2, step as u64]).rng();
                let starts: Vec<usize> = (0..config.rollout_batch).map(|_| rrng.random_range(0..data.len())).collect();
                let starts = data.observations.select(ndarray::Axis(0), &starts);
                let batch = rollout(model, &Stochastic(&sac), &starts, config.horizon, &mut rrng)?;
                if let Some(u) = &batch.u {
                    u_sum += u.sum();
                    u_n += u.len();
                }
                r_sum += batch.model_reward.sum();
                r_n += batch.len();
                if config.record_trace {
                    trace.extend(trace_records(epoch, &batch));
                }
                replay.model.push(&batch);
            }
            let batch = replay.sample(config.sac.batch_size, &mut rng);
            let upd = sac.update(&batch, &mut rng).map_err(|e| Error::Training {
                epoch,
                detail: e.to_string(),
            })?;
            run.add(&upd);
            step += 1;
        }
        let eval = if config.epoch_eval_episodes > 0 {
            let actor = SacActor { sac: &sac, stats, deterministic: true };
            Some(evaluate_return(env, &actor, config.epoch_eval_episodes, root.path(&[3, epoch as u64]).raw(), exec)?)
        } else {
            None
        };
        let n = run.n as f64;
        log.push(EpochLog {
            epoch,
            step,
            critic_loss: run.critic / n,
            actor_loss: run.actor / n,
            alpha: sac.alpha(),
            entropy: run.entropy / n,
            q_mean: run.q_mean / n,
            q_std: run.q_std / n,
            mean_u: (u_n > 0).then(|| u_sum / u_n as f64),
            model_reward_mean: (r_n > 0).then(|| r_sum / r_n as f64),
            eval_return: eval.as_ref().map(|e| e.mean),
            eval_std: eval.as_ref().map(|e| e.std),
        });
    }
    let final_eval = if config.final_eval_episodes > 0 {
        let actor = SacActor { sac: &sac, stats, deterministic: true };
        Some(evaluate_return(env, &actor, config.final_eval_episodes, root.child(4).raw(), exec)?)
    } else {
        None
    };
    Ok(TrainOutcome { sac, log, trace, final_eval })
}

/// Default grid for the penalty weight.
pub const LAMBDA_GRID: [f64; 7] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_return: f64,
    pub std_return: f64,
}

/// Highest mean return; ties go to the larger λ.
pub fn select_lambda(rows: &[SweepRow]) -> Result<f64> {
    rows.iter()
        .max_by(|a, b| a.mean_return.total_cmp(&b.mean_return).then(a.lambda.total_cmp(&b.lambda)))
        .map(|r| r.lambda)
        .ok_or_else(|| Error::Param("empty λ sweep".into()))
}

/// Runs `train_eval` once per λ and picks the best.
pub fn lambda_sweep(grid: &[f64], mut train_eval: impl FnMut(f64) -> Result<ReturnStats>) -> Result<(Vec<SweepRow>, f64)> {
    if grid.is_empty() {
        return Err(Error::Param("λ grid is empty".into()));
    }
    let rows = grid
        .iter()
        .map(|&lambda| {
            let r = train_eval(lambda)?;
            Ok(SweepRow {
                lambda,
                mean_return: r.mean,
                std_return: r.std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select_lambda(&rows)?;
    Ok((rows, best))
}
