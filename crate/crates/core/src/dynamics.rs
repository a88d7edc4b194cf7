//! Probabilistic dynamics ensemble over normalized `(s, a) ↦ (s′ − s, r)`.

use gormpo_nn::{Activation, Bound, Mlp, ParamStore, Tape, Var};
use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::data::{NormStats, OfflineDataset};
use crate::error::{format_err, Error, Result};
use crate::exec::Exec;
use crate::guardian::PenalizedModel;
use crate::rng::SeedStream;
use crate::train::{fit_params, FitReport, TrainConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub members: usize,
    pub elites: usize,
    pub hidden: Vec<usize>,
    pub holdout_ratio: f64,
    /// Train each member on a bootstrap resample; otherwise on all training rows.
    pub bootstrap: bool,
    pub min_log_std: f64,
    pub max_log_std: f64,
    pub train: TrainConfig,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            members: 7,
            elites: 5,
            hidden: vec![200, 200, 200, 200],
            holdout_ratio: 0.2,
            bootstrap: true,
            min_log_std: 1e-4f64.ln(),
            max_log_std: 10f64.ln(),
            train: TrainConfig {
                epochs: 200,
                batch_size: 256,
                lr: 1e-3,
                patience: Some(10),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub members: Vec<FitReport>,
    /// Holdout mean squared error of each member's mean prediction.
    pub holdout_mse: Vec<f64>,
    pub elites: Vec<usize>,
}

/// How `predict` picks a member and whether it samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Uniform elite member per row, Gaussian sample.
    Sample,
    /// Gaussian sample from a fixed member.
    SampleMember(usize),
    /// Mean of a fixed member; a pure function of the inputs.
    Mean(usize),
}

/// Next-state and reward predictions in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub next_obs: Array2<f64>,
    pub reward: Array1<f64>,
    pub member: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DynamicsEnsemble {
    config: DynamicsConfig,
    obs_dim: usize,
    act_dim: usize,
    stores: Vec<ParamStore>,
    nets: Vec<Mlp>,
    elites: Vec<usize>,
    holdout_mse: Vec<f64>,
    stats: NormStats,
}

impl DynamicsEnsemble {
    fn build(config: DynamicsConfig, stats: NormStats, seed: u64) -> Self {
        let (obs_dim, act_dim) = (stats.obs_dim(), stats.act_dim());
        let mut sizes = vec![obs_dim + act_dim];
        sizes.extend(&config.hidden);
        sizes.push(2 * (obs_dim + 1));
        let (stores, nets) = (0..config.members)
            .map(|m| {
                let mut rng = SeedStream::new(seed).child(m as u64).rng();
                let mut store = ParamStore::new();
                let net = Mlp::new(&mut store, "net", &sizes, Activation::Silu, false, &mut rng);
                (store, net)
            })
            .unzip();
        Self {
            elites: (0..config.elites.min(config.members)).collect(),
            holdout_mse: vec![f64::NAN; config.members],
            config,
            obs_dim,
            act_dim,
            stores,
            nets,
            stats,
        }
    }

    /// Trains every member on its own bootstrap of the non-holdout rows.
    /// Members are independent given their seeds, so `exec` does not change results.
    pub fn fit(ds: &OfflineDataset, config: DynamicsConfig, seed: u64, exec: Exec) -> Result<(Self, EnsembleReport)> {
        if !ds.normalized {
            return Err(Error::Param("dynamics ensemble expects a normalized dataset".into()));
        }
        if ds.len() < 100 {
            return Err(Error::Param(format!("need at least 100 transitions, got {}", ds.len())));
        }
        if config.members == 0 || config.elites == 0 || config.elites > config.members {
            return Err(Error::Param("need 1 ≤ elites ≤ members".into()));
        }
        if !(0.0..1.0).contains(&config.holdout_ratio) {
            return Err(Error::Param("holdout_ratio must lie in [0, 1)".into()));
        }
        let stats = ds.norm_stats.clone().ok_or_else(|| Error::Param("normalized dataset lacks statistics".into()))?;
        let root = SeedStream::new(seed);
        let mut ens = Self::build(config, stats, root.child(0).raw());
        let inputs = ds.state_actions();
        let targets = ens.targets(ds);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut root.child(1).rng());
        let n_hold = (ens.config.holdout_ratio * ds.len() as f64).round() as usize;
        let (hold, train) = order.split_at(n_hold);
        // Without a holdout, selection falls back to training error.
        let hold = if hold.is_empty() { train } else { hold };
        let (hx, hy) = (inputs.select(Axis(0), hold), targets.select(Axis(0), hold));

        let this = &ens;
        let results = exec.try_map(this.config.members, |m| -> Result<(ParamStore, FitReport)> {
            let member_seed = root.path(&[2, m as u64]);
            let mut rng = member_seed.rng();
            let boot: Vec<usize> = if this.config.bootstrap {
                (0..train.len()).map(|_| train[rng.random_range(0..train.len())]).collect()
            } else {
                train.to_vec()
            };
            let (bx, by) = (inputs.select(Axis(0), &boot), targets.select(Axis(0), &boot));
            let mut store = this.stores[m].clone();
            let net = &this.nets[m];
            let report = fit_params(
                &mut store,
                boot.len(),
                &this.config.train,
                &mut rng,
                |s, idx, _| {
                    let tape = Tape::new();
                    let p = s.bind(&tape);
                    let loss = this.nll_tape(net, &p, tape.leaf(bx.select(Axis(0), idx)), tape.leaf(by.select(Axis(0), idx)));
                    let g = tape.backward(loss);
                    (loss.item(), s.grads(&p, &g))
                },
                |s| this.mse(net, s, &hx, &hy),
            )?;
            Ok((store, report))
        })?;
        let mut reports = Vec::with_capacity(results.len());
        for (m, (store, report)) in results.into_iter().enumerate() {
            ens.stores[m] = store;
            reports.push(report);
        }
        ens.holdout_mse = (0..ens.config.members)
            .map(|m| ens.mse(&ens.nets[m], &ens.stores[m], &hx, &hy))
            .collect();
        let mut ranked: Vec<usize> = (0..ens.config.members).collect();
        ranked.sort_by(|&a, &b| ens.holdout_mse[a].total_cmp(&ens.holdout_mse[b]).then(a.cmp(&b)));
        ens.elites = ranked[..ens.config.elites].to_vec();
        ens.elites.sort_unstable();
        let report = EnsembleReport {
            members: reports,
            holdout_mse: ens.holdout_mse.clone(),
            elites: ens.elites.clone(),
        };
        Ok((ens, report))
    }

    /// `[s′ − s, r]` in normalized units.
    fn targets(&self, ds: &OfflineDataset) -> Array2<f64> {
        let delta = &ds.next_observations - &ds.observations;
        concatenate(Axis(1), &[delta.view(), ds.rewards.view().insert_axis(Axis(1))]).expect("same rows")
    }

    fn log_std_var<'t>(&self, raw: Var<'t>) -> Var<'t> {
        let (lo, hi) = (self.config.min_log_std, self.config.max_log_std);
        let upper = (-(raw.add_scalar(-hi))).softplus().scale(-1.0).add_scalar(hi);
        upper.add_scalar(-lo).softplus().add_scalar(lo)
    }

    fn log_std(&self, raw: f64) -> f64 {
        let softplus = |x: f64| if x > 30.0 { x } else { x.exp().ln_1p() };
        let (lo, hi) = (self.config.min_log_std, self.config.max_log_std);
        lo + softplus(hi - softplus(hi - raw) - lo)
    }

    fn nll_tape<'t>(&self, net: &Mlp, p: &Bound<'t>, x: Var<'t>, y: Var<'t>) -> Var<'t> {
        let k = self.obs_dim + 1;
        let out = net.forward(p, x);
        let mean = out.slice_cols(0, k);
        let log_std = self.log_std_var(out.slice_cols(k, 2 * k));
        let z2 = (y - mean).square().mul(log_std.scale(-2.0).exp());
        (z2.scale(0.5) + log_std).add_scalar(0.5 * LN_2PI).sum_rows().mean()
    }

    fn mse(&self, net: &Mlp, store: &ParamStore, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let k = self.obs_dim + 1;
        let out = net.predict(store, x);
        (&out.slice(s![.., ..k]) - y).mapv(|v| v * v).mean().unwrap_or(f64::NAN)
    }

    pub fn config(&self) -> &DynamicsConfig {
        &self.config
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn elites(&self) -> &[usize] {
        &self.elites
    }

    pub fn holdout_mse(&self) -> &[f64] {
        &self.holdout_mse
    }

    pub fn n_members(&self) -> usize {
        self.nets.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Per-member Gaussian parameters `(mean, std)` over `[Δs, r]`.
    pub fn member_gaussian(&self, member: usize, obs: &Array2<f64>, act: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if member >= self.n_members() {
            return Err(Error::Param(format!("member {member} out of range 0..{}", self.n_members())));
        }
        self.check_inputs(obs, act)?;
        let k = self.obs_dim + 1;
        let x = concatenate(Axis(1), &[obs.view(), act.view()]).expect("same rows");
        let out = self.nets[member].predict(&self.stores[member], &x);
        let std = out.slice(s![.., k..]).mapv(|r| self.log_std(r).exp());
        Ok((out.slice(s![.., ..k]).to_owned(), std))
    }

    fn check_inputs(&self, obs: &Array2<f64>, act: &Array2<f64>) -> Result<()> {
        if obs.ncols() != self.obs_dim || act.ncols() != self.act_dim || obs.nrows() != act.nrows() {
            return Err(Error::Param(format!(
                "expected obs [n×{}] and actions [n×{}], got {:?} and {:?}",
                self.obs_dim,
                self.act_dim,
                obs.dim(),
                act.dim()
            )));
        }
        Ok(())
    }

    /// Predicts `(ŝ′, r̂)` for normalized observations and normalized actions.
    pub fn predict(&self, obs: &Array2<f64>, act: &Array2<f64>, mode: PredictMode, rng: &mut ChaCha8Rng) -> Result<Prediction> {
        self.check_inputs(obs, act)?;
        let n = obs.nrows();
        let members: Vec<usize> = match mode {
            PredictMode::Sample => (0..n).map(|_| self.elites[rng.random_range(0..self.elites.len())]).collect(),
            PredictMode::SampleMember(m) | PredictMode::Mean(m) => {
                if m >= self.n_members() {
                    return Err(Error::Param(format!("member {m} out of range 0..{}", self.n_members())));
                }
                vec![m; n]
            }
        };
        let k = self.obs_dim + 1;
        let mut mean = Array2::zeros((n, k));
        let mut std = Array2::zeros((n, k));
        for m in 0..self.n_members() {
            let rows: Vec<usize> = (0..n).filter(|&i| members[i] == m).collect();
            if rows.is_empty() {
                continue;
            }
            let (mu, sd) = self.member_gaussian(m, &obs.select(Axis(0), &rows), &act.select(Axis(0), &rows))?;
            for (j, &i) in rows.iter().enumerate() {
                mean.row_mut(i).assign(&mu.row(j));
                std.row_mut(i).assign(&sd.row(j));
            }
        }
        if !matches!(mode, PredictMode::Mean(_)) {
            for (m, s) in mean.iter_mut().zip(&std) {
                let e: f64 = StandardNormal.sample(rng);
                *m += s * e;
            }
        }
        Ok(Prediction {
            next_obs: obs + &mean.slice(s![.., ..self.obs_dim]),
            reward: mean.column(self.obs_dim).to_owned(),
            member: members,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("dynamics_ensemble");
        c.put_str("config", &serde_json::to_string(&self.config).expect("config serializes"));
        c.nest("norm_stats.", &self.stats.to_container());
        c.put_u64("elites", self.elites.iter().map(|&e| e as u64).collect());
        c.put_f64("holdout_mse", vec![self.holdout_mse.len()], self.holdout_mse.clone());
        for (m, store) in self.stores.iter().enumerate() {
            for (name, v) in store.iter() {
                c.put_array2(&format!("member{m}.{name}"), v);
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("dynamics_ensemble")?;
        let config: DynamicsConfig =
            serde_json::from_str(c.get_str("config")?).map_err(|e| format_err("config", e.to_string()))?;
        let stats = NormStats::from_container(&c.sub("norm_stats."))?;
        let mut ens = Self::build(config, stats, 0);
        for m in 0..ens.n_members() {
            let names: Vec<String> = ens.stores[m].iter().map(|(n, _)| n.to_string()).collect();
            let mut items = Vec::new();
            for n in &names {
                items.push((n.as_str(), c.get_array2(&format!("member{m}.{n}"))?));
            }
            ens.stores[m].load(items).map_err(|e| format_err(format!("member{m}"), e.to_string()))?;
        }
        ens.elites = c.get_u64("elites")?.iter().map(|&e| e as usize).collect();
        if ens.elites.is_empty() || ens.elites.iter().any(|&e| e >= ens.n_members()) {
            return Err(format_err("elites", "empty or out of range"));
        }
        ens.holdout_mse = c.get_real("holdout_mse")?.1;
        Ok(ens)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// A policy acting on normalized observations and returning raw actions.
pub trait RolloutPolicy: Sync {
    fn act_batch(&self, obs: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64>;
}

impl<F> RolloutPolicy for F
where
    F: Fn(&Array2<f64>, &mut ChaCha8Rng) -> Array2<f64> + Sync,
{
    fn act_batch(&self, obs: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
        self(obs, rng)
    }
}

/// Generated transitions; every row is non-terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub obs: Array2<f64>,
    /// Raw actions as returned by the policy.
    pub act: Array2<f64>,
    pub act_norm: Array2<f64>,
    /// `r̃` under a guardian, otherwise `r̂`.
    pub reward: Array1<f64>,
    pub model_reward: Array1<f64>,
    pub next_obs: Array2<f64>,
    /// Rollout step, 1-based.
    pub depth: Vec<u8>,
    pub log_p: Option<Array1<f64>>,
    pub u: Option<Array1<f64>>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean_penalty(&self) -> Option<f64> {
        self.u.as_ref().and_then(|u| u.mean())
    }
}

/// Inputs and model output of one rollout step: observations, raw and
/// normalized actions.
type StepParts = (Array2<f64>, Array2<f64>, Array2<f64>, crate::guardian::ModelStep);

/// Branches `horizon`-step rollouts from each row of `starts` (normalized).
pub fn rollout(
    model: &PenalizedModel<'_>,
    policy: &dyn RolloutPolicy,
    starts: &Array2<f64>,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    if horizon == 0 || horizon > u8::MAX as usize {
        return Err(Error::Param(format!("rollout horizon {horizon} must be in 1..=255")));
    }
    let stats = model.ensemble.stats();
    let mut parts: Vec<StepParts> = Vec::with_capacity(horizon);
    let mut obs = starts.clone();
    for _ in 0..horizon {
        let act = policy.act_batch(&obs, rng);
        let act_norm = stats.normalize_act(&act);
        let step = model.penalized_step(&obs, &act_norm, rng)?;
        let next = step.next_obs.clone();
        parts.push((obs, act, act_norm, step));
        obs = next;
    }
    let cat2 = |f: &dyn Fn(&StepParts) -> ndarray::ArrayView2<'_, f64>| {
        concatenate(Axis(0), &parts.iter().map(f).collect::<Vec<_>>()).expect("same width")
    };
    let cat1 = |f: &dyn Fn(&crate::guardian::ModelStep) -> Option<ndarray::ArrayView1<'_, f64>>| -> Option<Array1<f64>> {
        let views: Option<Vec<_>> = parts.iter().map(|p| f(&p.3)).collect();
        views.map(|v| concatenate(Axis(0), &v).expect("1-D"))
    };
    let n = starts.nrows();
    Ok(RolloutBatch {
        obs: cat2(&|p| p.0.view()),
        act: cat2(&|p| p.1.view()),
        act_norm: cat2(&|p| p.2.view()),
        next_obs: cat2(&|p| p.3.next_obs.view()),
        reward: cat1(&|s| Some(s.reward.view())).expect("always present"),
        model_reward: cat1(&|s| Some(s.model_reward.view())).expect("always present"),
        log_p: cat1(&|s| s.penalty.as_ref().map(|p| p.log_p.view())),
        u: cat1(&|s| s.penalty.as_ref().map(|p| p.u.view())),
        depth: (1..=horizon).flat_map(|h| std::iter::repeat(h as u8).take(n)).collect(),
    })
}
