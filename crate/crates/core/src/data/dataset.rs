use std::ops::Range;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};

use crate::container::Container;
use crate::error::{format_err, param, Result};

const MIN_STD: f64 = 1e-8;

/// Per-feature z-score statistics of a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub obs_mean: Array1<f64>,
    pub obs_std: Array1<f64>,
    pub act_mean: Array1<f64>,
    pub act_std: Array1<f64>,
    pub rew_mean: f64,
    pub rew_std: f64,
    /// Normalized rewards are clipped to `[-c, c]` when set.
    pub reward_clip: Option<f64>,
}

fn mean_std(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s < MIN_STD { 1.0 } else { s });
    (mean, std)
}

impl NormStats {
    pub fn fit(ds: &OfflineDataset, reward_clip: Option<f64>) -> Self {
        // States include the final next-observation of each trajectory.
        let states = concatenate(Axis(0), &[ds.observations.view(), ds.next_observations.view()])
            .expect("matching widths");
        let (obs_mean, obs_std) = mean_std(&states);
        let (act_mean, act_std) = mean_std(&ds.actions);
        let n = ds.rewards.len().max(1) as f64;
        let rew_mean = ds.rewards.sum() / n;
        let rew_var = ds.rewards.iter().map(|r| (r - rew_mean).powi(2)).sum::<f64>() / n;
        let rew_std = if rew_var.sqrt() < MIN_STD { 1.0 } else { rew_var.sqrt() };
        Self {
            obs_mean,
            obs_std,
            act_mean,
            act_std,
            rew_mean,
            rew_std,
            reward_clip,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_mean.len()
    }

    pub fn act_dim(&self) -> usize {
        self.act_mean.len()
    }

    pub fn normalize_obs(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.obs_mean) / &self.obs_std
    }

    pub fn denormalize_obs(&self, z: &Array2<f64>) -> Array2<f64> {
        z * &self.obs_std + &self.obs_mean
    }

    pub fn normalize_act(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.act_mean) / &self.act_std
    }

    pub fn denormalize_act(&self, z: &Array2<f64>) -> Array2<f64> {
        z * &self.act_std + &self.act_mean
    }

    pub fn normalize_obs_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.obs_mean.iter().zip(&self.obs_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn normalize_act_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.act_mean.iter().zip(&self.act_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize_act_row(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.act_mean.iter().zip(&self.act_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn normalize_reward(&self, r: f64) -> f64 {
        let z = (r - self.rew_mean) / self.rew_std;
        match self.reward_clip {
            Some(c) => z.clamp(-c, c),
            None => z,
        }
    }

    /// Inverse of the z-score only; clipping is not invertible.
    pub fn denormalize_reward(&self, z: f64) -> f64 {
        z * self.rew_std + self.rew_mean
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("norm_stats");
        let v = |a: &Array1<f64>| (vec![a.len()], a.to_vec());
        let (s, d) = v(&self.obs_mean);
        c.put_f64("obs_mean", s, d);
        let (s, d) = v(&self.obs_std);
        c.put_f64("obs_std", s, d);
        let (s, d) = v(&self.act_mean);
        c.put_f64("act_mean", s, d);
        let (s, d) = v(&self.act_std);
        c.put_f64("act_std", s, d);
        c.put_f64("reward", vec![2], vec![self.rew_mean, self.rew_std]);
        c.put_scalar("reward_clip", self.reward_clip.unwrap_or(f64::NAN));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let reward = c.get_real("reward")?.1;
        if reward.len() != 2 {
            return Err(format_err("reward", "expected mean and std"));
        }
        let clip = c.get_scalar("reward_clip")?;
        Ok(Self {
            obs_mean: c.get_array1("obs_mean")?,
            obs_std: c.get_array1("obs_std")?,
            act_mean: c.get_array1("act_mean")?,
            act_std: c.get_array1("act_std")?,
            rew_mean: reward[0],
            rew_std: reward[1],
            reward_clip: (!clip.is_nan()).then_some(clip),
        })
    }
}

/// Columnar store of logged transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_observations: Array2<f64>,
    pub terminals: Vec<bool>,
    pub trajectory_starts: Vec<usize>,
    /// Statistics of the training split this dataset is expressed against.
    pub norm_stats: Option<NormStats>,
    /// Whether the arrays are already z-scored with `norm_stats`.
    pub normalized: bool,
}

impl OfflineDataset {
    pub fn new(
        observations: Array2<f64>,
        actions: Array2<f64>,
        rewards: Array1<f64>,
        next_observations: Array2<f64>,
        terminals: Vec<bool>,
        trajectory_starts: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            observations,
            actions,
            rewards,
            next_observations,
            terminals,
            trajectory_starts,
            norm_stats: None,
            normalized: false,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.observations.nrows();
        if self.actions.nrows() != n
            || self.rewards.len() != n
            || self.next_observations.nrows() != n
            || self.terminals.len() != n
        {
            return param("dataset arrays disagree on the number of transitions");
        }
        if self.next_observations.ncols() != self.observations.ncols() {
            return param("observation and next-observation widths differ");
        }
        if n > 0 && self.trajectory_starts.first() != Some(&0) {
            return param("trajectory_starts must begin at 0");
        }
        if self.trajectory_starts.windows(2).any(|w| w[0] >= w[1]) || self.trajectory_starts.last().is_some_and(|&s| s >= n) {
            return param("trajectory_starts must be strictly increasing and in range");
        }
        if n == 0 && !self.trajectory_starts.is_empty() {
            return param("empty dataset with trajectory starts");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.ncols()
    }

    pub fn act_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectory_starts.len()
    }

    pub fn trajectory_ranges(&self) -> Vec<Range<usize>> {
        let n = self.len();
        self.trajectory_starts
            .iter()
            .enumerate()
            .map(|(i, &s)| s..self.trajectory_starts.get(i + 1).copied().unwrap_or(n))
            .collect()
    }

    /// Rows of the listed trajectories, in the given order.
    pub fn select_trajectories(&self, which: &[usize]) -> Self {
        let ranges = self.trajectory_ranges();
        let mut rows = Vec::new();
        let mut starts = Vec::with_capacity(which.len());
        for &t in which {
            starts.push(rows.len());
            rows.extend(ranges[t].clone());
        }
        Self {
            observations: self.observations.select(Axis(0), &rows),
            actions: self.actions.select(Axis(0), &rows),
            rewards: self.rewards.select(Axis(0), &rows),
            next_observations: self.next_observations.select(Axis(0), &rows),
            terminals: rows.iter().map(|&r| self.terminals[r]).collect(),
            trajectory_starts: starts,
            norm_stats: self.norm_stats.clone(),
            normalized: self.normalized,
        }
    }

    /// Density-model inputs: `(s′, a)` rows.
    pub fn pairs(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.next_observations.view(), self.actions.view()]).expect("equal row counts")
    }

    /// Dynamics-model inputs: `(s, a)` rows.
    pub fn state_actions(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.observations.view(), self.actions.view()]).expect("equal row counts")
    }

    /// Expresses the dataset in the z-scored space of `stats`.
    pub fn normalize_with(&self, stats: &NormStats) -> Result<Self> {
        if self.normalized {
            return param("dataset is already normalized");
        }
        if stats.obs_dim() != self.obs_dim() || stats.act_dim() != self.act_dim() {
            return param("normalization statistics do not match the dataset widths");
        }
        Ok(Self {
            observations: stats.normalize_obs(&self.observations),
            actions: stats.normalize_act(&self.actions),
            rewards: self.rewards.mapv(|r| stats.normalize_reward(r)),
            next_observations: stats.normalize_obs(&self.next_observations),
            terminals: self.terminals.clone(),
            trajectory_starts: self.trajectory_starts.clone(),
            norm_stats: Some(stats.clone()),
            normalized: true,
        })
    }

    /// Raw-unit copy of a normalized dataset (rewards are un-z-scored, not un-clipped).
    pub fn denormalize(&self) -> Result<Self> {
        let stats = match (&self.norm_stats, self.normalized) {
            (Some(s), true) => s,
            _ => return param("dataset is not normalized"),
        };
        Ok(Self {
            observations: stats.denormalize_obs(&self.observations),
            actions: stats.denormalize_act(&self.actions),
            rewards: self.rewards.mapv(|r| stats.denormalize_reward(r)),
            next_observations: stats.denormalize_obs(&self.next_observations),
            terminals: self.terminals.clone(),
            trajectory_starts: self.trajectory_starts.clone(),
            norm_stats: Some(stats.clone()),
            normalized: false,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("offline_dataset");
        c.put_real_array2("observations", &self.observations);
        c.put_real_array2("actions", &self.actions);
        c.put_real("rewards", vec![self.rewards.len()], self.rewards.to_vec());
        c.put_real_array2("next_observations", &self.next_observations);
        c.put_u8("terminals", self.terminals.iter().map(|&t| u8::from(t)).collect());
        c.put_u64("trajectory_starts", self.trajectory_starts.iter().map(|&s| s as u64).collect());
        c.put_u8("normalized", vec![u8::from(self.normalized)]);
        if let Some(stats) = &self.norm_stats {
            c.nest("norm_stats", &stats.to_container());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("offline_dataset")?;
        let terminals = c.get_u8("terminals")?.iter().map(|&t| t != 0).collect();
        let starts = c.get_u64("trajectory_starts")?.iter().map(|&s| s as usize).collect();
        let norm_stats = if c.contains("norm_stats.kind") {
            Some(NormStats::from_container(&c.sub("norm_stats"))?)
        } else {
            None
        };
        let normalized = c.get_u8("normalized")?.first().is_some_and(|&b| b != 0);
        let mut ds = Self::new(
            c.get_array2("observations")?,
            c.get_array2("actions")?,
            c.get_array1("rewards")?,
            c.get_array2("next_observations")?,
            terminals,
            starts,
        )
        .map_err(|e| format_err("dataset", e.to_string()))?;
        ds.norm_stats = norm_stats;
        ds.normalized = normalized;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Z-scores `ds` with statistics computed from `ds` itself.
pub fn normalize(ds: &OfflineDataset, reward_clip: Option<f64>) -> Result<OfflineDataset> {
    ds.normalize_with(&NormStats::fit(ds, reward_clip))
}

/// Inverse of the observation z-score.
pub fn denormalize(x: &Array2<f64>, stats: &NormStats) -> Array2<f64> {
    stats.denormalize_obs(x)
}
