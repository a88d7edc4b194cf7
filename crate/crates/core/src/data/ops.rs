use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{NormStats, OfflineDataset};
use crate::error::{param, Error, Result};
use crate::exec::Exec;
use crate::mdp::{Actor, Env};
use crate::rng::SeedStream;

/// Rolls out `behavior` for `n_episodes` full episodes. Episode `i` uses its
/// own seed stream, so the result does not depend on the execution mode.
pub fn collect_offline<E: Env, A: Actor>(
    env: &E,
    behavior: &A,
    n_episodes: usize,
    seed: u64,
    exec: Exec,
) -> Result<OfflineDataset> {
    if n_episodes == 0 {
        return param("n_episodes must be at least 1");
    }
    let root = SeedStream::new(seed);
    let meta = env.meta();
    let episodes = exec.try_map(n_episodes, |i| -> Result<_> {
        let mut rng = root.child(i as u64).rng();
        let mut s = env.reset(&mut rng);
        let mut rows = Vec::with_capacity(meta.horizon);
        loop {
            let obs = env.observe(&s);
            let action = behavior.act(&obs, &mut rng);
            let step = env.step(&s, &action, &mut rng)?;
            let next = env.observe(&step.state);
            rows.push((obs, action, step.reward, next, step.done));
            s = step.state;
            if step.done {
                break;
            }
        }
        Ok(rows)
    })?;
    let n: usize = episodes.iter().map(Vec::len).sum();
    let (ds, da) = (meta.obs_dim, meta.action_space.dim());
    let mut obs = Array2::zeros((n, ds));
    let mut act = Array2::zeros((n, da));
    let mut next = Array2::zeros((n, ds));
    let mut rew = Array1::zeros(n);
    let mut terminals = Vec::with_capacity(n);
    let mut starts = Vec::with_capacity(n_episodes);
    let mut row = 0;
    for ep in episodes {
        starts.push(row);
        for (o, a, r, no, d) in ep {
            obs.row_mut(row).assign(&Array1::from(o));
            act.row_mut(row).assign(&Array1::from(a));
            next.row_mut(row).assign(&Array1::from(no));
            rew[row] = r;
            terminals.push(d);
            row += 1;
        }
    }
    OfflineDataset::new(obs, act, rew, next, terminals, starts)
}

/// Random split of whole trajectories into consecutive fractions.
pub fn split_trajectories(ds: &OfflineDataset, fractions: &[f64], seed: u64) -> Result<Vec<OfflineDataset>> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return param(format!("split fractions {fractions:?} must be non-negative and sum to 1"));
    }
    let n = ds.n_trajectories();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).rng());
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut cum = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).clamp(start, n)
        };
        out.push(ds.select_trajectories(&order[start..end]));
        start = end;
    }
    Ok(out)
}

/// Box over per-step reward and action L2 norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub reward_min: f64,
    pub reward_max: f64,
    pub anorm_min: f64,
    pub anorm_max: f64,
}

impl Region {
    pub fn contains(&self, reward: f64, action: &[f64]) -> bool {
        let norm = action.iter().map(|a| a * a).sum::<f64>().sqrt();
        (self.reward_min..=self.reward_max).contains(&reward) && (self.anorm_min..=self.anorm_max).contains(&norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifyReport {
    pub n_trajectories: usize,
    pub n_in_region: usize,
    pub n_dropped: usize,
    /// Dropped trajectories as a fraction of all trajectories.
    pub dropped_fraction: f64,
    /// Dropped transitions as a fraction of all transitions.
    pub dropped_transition_fraction: f64,
    /// Membership rule used to classify trajectories.
    pub membership: String,
    pub warning: Option<String>,
}

/// Removes `round(drop_frac · n_in_region)` randomly chosen trajectories that
/// have at least one step inside `region`.
pub fn sparsify(
    ds: &OfflineDataset,
    region: &Region,
    drop_frac: f64,
    seed: u64,
) -> Result<(OfflineDataset, SparsifyReport)> {
    if !(0.0..=1.0).contains(&drop_frac) {
        return param(format!("drop_frac {drop_frac} outside [0, 1]"));
    }
    if region.reward_min > region.reward_max || region.anorm_min > region.anorm_max {
        return param("region bounds are not ordered");
    }
    let ranges = ds.trajectory_ranges();
    let in_region: Vec<usize> = ranges
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            let mut rows = (*r).clone();
            rows.any(|i| region.contains(ds.rewards[i], ds.actions.row(i).as_slice().expect("contiguous row")))
        })
        .map(|(t, _)| t)
        .collect();
    let mut report = SparsifyReport {
        n_trajectories: ranges.len(),
        n_in_region: in_region.len(),
        n_dropped: 0,
        dropped_fraction: 0.0,
        dropped_transition_fraction: 0.0,
        membership: "any-step".into(),
        warning: None,
    };
    if in_region.is_empty() {
        report.warning = Some("no trajectory intersects the region; dataset unchanged".into());
        return Ok((ds.clone(), report));
    }
    let n_drop = (drop_frac * in_region.len() as f64).round() as usize;
    let mut candidates = in_region;
    candidates.shuffle(&mut SeedStream::new(seed).rng());
    let mut dropped = vec![false; ranges.len()];
    for &t in &candidates[..n_drop] {
        dropped[t] = true;
    }
    let keep: Vec<usize> = (0..ranges.len()).filter(|&t| !dropped[t]).collect();
    if keep.is_empty() {
        return Err(Error::Param("sparsification removed every trajectory".into()));
    }
    let removed_rows: usize = (0..ranges.len()).filter(|&t| dropped[t]).map(|t| ranges[t].len()).sum();
    report.n_dropped = n_drop;
    report.dropped_fraction = n_drop as f64 / ranges.len() as f64;
    report.dropped_transition_fraction = removed_rows as f64 / ds.len().max(1) as f64;
    Ok((ds.select_trajectories(&keep), report))
}

/// Labeled `(s′, a)` inputs for detector evaluation; `true` marks OOD rows.
#[derive(Debug, Clone, PartialEq)]
pub struct OodBenchmark {
    pub inputs: Array2<f64>,
    pub labels: Vec<bool>,
    pub shift_mu: f64,
    pub noise_std: f64,
}

impl OodBenchmark {
    pub fn n_ood(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Z-scores the `(s′, a)` columns with `stats`, e.g. after shifting raw data.
    pub fn normalized(&self, stats: &NormStats) -> Result<Self> {
        let d = stats.obs_dim();
        if self.inputs.ncols() != d + stats.act_dim() {
            return param(format!("benchmark has {} columns, statistics expect {}", self.inputs.ncols(), d + stats.act_dim()));
        }
        let obs = stats.normalize_obs(&self.inputs.slice(ndarray::s![.., ..d]).to_owned());
        let act = stats.normalize_act(&self.inputs.slice(ndarray::s![.., d..]).to_owned());
        Ok(Self {
            inputs: concatenate(Axis(1), &[obs.view(), act.view()]).expect("same rows"),
            ..self.clone()
        })
    }

    /// Splits scores into `(id, ood)` by label.
    pub fn partition<T: Copy>(&self, scores: &[T]) -> (Vec<T>, Vec<T>) {
        let mut id = Vec::new();
        let mut ood = Vec::new();
        for (&s, &l) in scores.iter().zip(&self.labels) {
            if l {
                ood.push(s)
            } else {
                id.push(s)
            }
        }
        (id, ood)
    }
}

/// Picks `n_traj` trajectories and stacks their `(s′, a)` pairs (ID) on top of
/// copies perturbed elementwise by `Normal(mu, noise_std)` (OOD). Noise is
/// applied in whatever space `ds` is expressed in; pass a normalized dataset
/// to shift in standardized units.
pub fn make_ood(ds: &OfflineDataset, mu: f64, n_traj: usize, noise_std: f64, seed: u64) -> Result<OodBenchmark> {
    if mu < 0.0 || !mu.is_finite() {
        return param(format!("shift mu {mu} must be finite and non-negative"));
    }
    if noise_std.is_nan() || noise_std < 0.0 {
        return param(format!("noise std {noise_std} must be non-negative"));
    }
    if n_traj == 0 || ds.n_trajectories() < n_traj {
        return param(format!("need {n_traj} trajectories, dataset has {}", ds.n_trajectories()));
    }
    let mut rng = SeedStream::new(seed).rng();
    let mut order: Vec<usize> = (0..ds.n_trajectories()).collect();
    order.shuffle(&mut rng);
    let subset = ds.select_trajectories(&order[..n_traj]);
    let id = subset.pairs();
    let noise = Normal::new(mu, noise_std).map_err(|e| Error::Param(e.to_string()))?;
    let ood = id.mapv(|x| x + noise.sample(&mut rng));
    let n = id.nrows();
    Ok(OodBenchmark {
        inputs: concatenate(Axis(0), &[id.view(), ood.view()]).expect("same width"),
        labels: (0..2 * n).map(|i| i >= n).collect(),
        shift_mu: mu,
        noise_std,
    })
}
