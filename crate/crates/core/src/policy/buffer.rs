use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::sac::Batch;
use crate::data::OfflineDataset;
use crate::dynamics::RolloutBatch;
use crate::error::{Error, Result};

/// Fixed-capacity ring buffer of generated transitions.
#[derive(Debug, Clone)]
pub struct ModelBuffer {
    obs: Array2<f64>,
    act: Array2<f64>,
    reward: Array1<f64>,
    next_obs: Array2<f64>,
    depth: Vec<u8>,
    len: usize,
    head: usize,
}

impl ModelBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs: Array2::zeros((capacity, obs_dim)),
            act: Array2::zeros((capacity, act_dim)),
            reward: Array1::zeros(capacity),
            next_obs: Array2::zeros((capacity, obs_dim)),
            depth: vec![0; capacity],
            len: 0,
            head: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.depth.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Deepest stored rollout step.
    pub fn max_depth(&self) -> u8 {
        self.depth[..self.len].iter().copied().max().unwrap_or(0)
    }

    /// Appends every row, overwriting the oldest once full.
    pub fn push(&mut self, batch: &RolloutBatch) {
        let cap = self.capacity();
        if cap == 0 {
            return;
        }
        for i in 0..batch.len() {
            let h = self.head;
            self.obs.row_mut(h).assign(&batch.obs.row(i));
            self.act.row_mut(h).assign(&batch.act.row(i));
            self.reward[h] = batch.reward[i];
            self.next_obs.row_mut(h).assign(&batch.next_obs.row(i));
            self.depth[h] = batch.depth[i];
            self.head = (h + 1) % cap;
            self.len = (self.len + 1).min(cap);
        }
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Batch {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len)).collect();
        Batch {
            obs: self.obs.select(Axis(0), &idx),
            act: self.act.select(Axis(0), &idx),
            reward: self.reward.select(Axis(0), &idx),
            next_obs: self.next_obs.select(Axis(0), &idx),
        }
    }
}

/// The offline data and the model buffer, sampled in a fixed ratio.
#[derive(Debug, Clone)]
pub struct ReplayPair {
    pub real: Batch,
    pub model: ModelBuffer,
    pub real_ratio: f64,
}

impl ReplayPair {
    /// `data` must be normalized; its actions are stored back in raw units.
    pub fn new(data: &OfflineDataset, model: ModelBuffer, real_ratio: f64) -> Result<Self> {
        let stats = data
            .norm_stats
            .as_ref()
            .filter(|_| data.normalized)
            .ok_or_else(|| Error::Param("replay expects a normalized dataset".into()))?;
        if !(0.0..=1.0).contains(&real_ratio) {
            return Err(Error::Param(format!("real ratio {real_ratio} outside [0, 1]")));
        }
        if data.is_empty() {
            return Err(Error::Param("empty offline dataset".into()));
        }
        Ok(Self {
            real: Batch {
                obs: data.observations.clone(),
                act: stats.denormalize_act(&data.actions),
                reward: data.rewards.clone(),
                next_obs: data.next_observations.clone(),
            },
            model,
            real_ratio,
        })
    }

    /// Real rows in a batch of `b`: `round(real_ratio · b)`, or all of them
    /// while the model buffer is empty.
    pub fn n_real(&self, b: usize) -> usize {
        if self.model.is_empty() {
            b
        } else {
            (self.real_ratio * b as f64).round() as usize
        }
    }

    /// Real rows first, then model rows.
    pub fn sample(&self, b: usize, rng: &mut ChaCha8Rng) -> Batch {
        let n_real = self.n_real(b);
        let idx: Vec<usize> = (0..n_real).map(|_| rng.random_range(0..self.real.len())).collect();
        let real = Batch {
            obs: self.real.obs.select(Axis(0), &idx),
            act: self.real.act.select(Axis(0), &idx),
            reward: self.real.reward.select(Axis(0), &idx),
            next_obs: self.real.next_obs.select(Axis(0), &idx),
        };
        if n_real == b {
            return real;
        }
        let model = self.model.sample(b - n_real, rng);
        let cat2 = |a: &Array2<f64>, b: &Array2<f64>| ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same width");
        Batch {
            obs: cat2(&real.obs, &model.obs),
            act: cat2(&real.act, &model.act),
            reward: ndarray::concatenate(Axis(0), &[real.reward.view(), model.reward.view()]).expect("1-D"),
            next_obs: cat2(&real.next_obs, &model.next_obs),
        }
    }
}
