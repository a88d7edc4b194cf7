use gormpo_core::data::{collect_offline, normalize, OfflineDataset};
use gormpo_core::density::{DensityEstimator, EstimatorKind};
use gormpo_core::dynamics::{DynamicsConfig, DynamicsEnsemble, PredictMode};
use gormpo_core::guardian::{Guardian, PenalizedModel, PenaltyConfig};
use gormpo_core::mdp::{ToyWean, WeaningClinician};
use gormpo_core::train::{FitReport, TrainConfig};
use gormpo_core::{Container, Exec, Result, SeedStream};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// `s′ = A s + B a`, `r = c·s`, noise free, in raw units.
fn linear_raw(n: usize, seed: u64) -> OfflineDataset {
    let mut rng = SeedStream::new(seed).rng();
    let obs = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
    let act = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
    let next = Array2::from_shape_fn((n, 3), |(i, j)| {
        let s = obs.row(i);
        match j {
            0 => 0.9 * s[0] + 0.1 * s[1],
            1 => 0.8 * s[1] + 0.3 * act[[i, 0]],
            _ => s[2] - 0.2 * s[0] + 0.5 * act[[i, 0]],
        }
    });
    let rew = Array1::from_shape_fn(n, |i| obs[[i, 0]] - 0.5 * obs[[i, 2]]);
    OfflineDataset::new(obs, act, rew, next, vec![false; n], vec![0]).unwrap()
}

fn linear(n: usize, seed: u64) -> OfflineDataset {
    normalize(&linear_raw(n, seed), None).unwrap()
}

fn config(members: usize, hidden: usize, epochs: usize) -> DynamicsConfig {
    DynamicsConfig {
        members,
        elites: members.div_ceil(2),
        hidden: vec![hidden, hidden],
        train: TrainConfig {
            epochs,
            batch_size: 256,
            lr: 1e-3,
            patience: Some(20),
            ..TrainConfig::default()
        },
        ..DynamicsConfig::default()
    }
}

fn mean_prediction(ens: &DynamicsEnsemble, ds: &OfflineDataset, member: usize) -> (Array2<f64>, Array1<f64>) {
    let p = ens
        .predict(&ds.observations, &ds.actions, PredictMode::Mean(member), &mut SeedStream::new(0).rng())
        .unwrap();
    (p.next_obs, p.reward)
}

#[test]
fn linear_dynamics_are_recovered() {
    let train = linear(10_000, 1);
    let test = linear_raw(2_000, 2).normalize_with(train.norm_stats.as_ref().unwrap()).unwrap();
    let (ens, _) = DynamicsEnsemble::fit(&train, config(3, 64, 60), 0, Exec::Parallel).unwrap();
    for &m in ens.elites() {
        let (next, rew) = mean_prediction(&ens, &test, m);
        let err = (&next - &test.next_observations).mapv(|e| e * e);
        let rmse = err.mean().unwrap().sqrt();
        let rew_rmse = (&rew - &test.rewards).mapv(|e| e * e).mean().unwrap().sqrt();
        assert!(rmse < 0.01, "member {m}: next-state rmse {rmse}");
        assert!(rew_rmse < 0.01, "member {m}: reward rmse {rew_rmse}");
    }
}

#[test]
fn delta_parameterization_memorizes_a_tiny_dataset() {
    let ds = linear(120, 3);
    let cfg = DynamicsConfig {
        holdout_ratio: 0.0,
        bootstrap: false,
        ..config(1, 64, 8000)
    };
    let cfg = DynamicsConfig {
        train: TrainConfig {
            batch_size: 120,
            lr: 3e-3,
            patience: None,
            plateau_factor: Some(0.5),
            plateau_patience: 100,
            ..cfg.train
        },
        ..cfg
    };
    let (ens, _) = DynamicsEnsemble::fit(&ds, cfg, 4, Exec::Parallel).unwrap();
    let (next, _) = mean_prediction(&ens, &ds, 0);
    let worst = (&next - &ds.next_observations).iter().fold(0.0f64, |m, e| m.max(e.abs()));
    assert!(worst < 1e-3, "max |ŝ′ − s′| = {worst}");
}

fn member_spread(ens: &DynamicsEnsemble, obs: &Array2<f64>, act: &Array2<f64>) -> f64 {
    let means: Vec<Array2<f64>> = (0..ens.n_members())
        .map(|m| ens.member_gaussian(m, obs, act).unwrap().0)
        .collect();
    let k = means.len() as f64;
    let avg = means.iter().fold(Array2::<f64>::zeros(means[0].raw_dim()), |a, m| a + m) / k;
    let var = means.iter().fold(Array2::<f64>::zeros(avg.raw_dim()), |a, m| a + (m - &avg).mapv(|d| d * d)) / k;
    var.mapv(f64::sqrt).sum_axis(Axis(1)).mean().unwrap()
}

#[test]
fn members_disagree_more_off_support() {
    let raw = collect_offline(&ToyWean::default(), &WeaningClinician::default(), 150, 5, Exec::Parallel).unwrap();
    let ds = normalize(&raw, None).unwrap();
    let (ens, _) = DynamicsEnsemble::fit(&ds, config(5, 64, 40), 6, Exec::Parallel).unwrap();
    let id_obs = ds.observations.clone();
    let mut rng = SeedStream::new(7).rng();
    let shifted = id_obs.mapv(|x| x + 2.0 + 0.1 * rng.random_range(-1.0..1.0));
    let id = member_spread(&ens, &id_obs, &ds.actions);
    let ood = member_spread(&ens, &shifted, &ds.actions);
    assert!(ood > id, "OOD spread {ood} vs ID spread {id}");
}

/// Returns the same log-density for every input.
struct Constant {
    log_p: f64,
    dim: usize,
}

impl DensityEstimator for Constant {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Kde
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn is_fitted(&self) -> bool {
        true
    }
    fn fit(&mut self, _: &Array2<f64>, _: &Array2<f64>, _: u64) -> Result<FitReport> {
        unimplemented!()
    }
    fn log_prob_with(&self, x: &Array2<f64>, _: Exec) -> Result<Array1<f64>> {
        Ok(Array1::from_elem(x.nrows(), self.log_p))
    }
    fn threshold(&self) -> Option<f64> {
        Some(0.0)
    }
    fn set_threshold(&mut self, _: f64) {}
    fn to_container(&self) -> Container {
        Container::new("constant")
    }
}

#[test]
fn penalty_limits_on_a_fitted_ensemble() {
    let ds = linear(300, 8);
    let (ens, _) = DynamicsEnsemble::fit(&ds, config(2, 16, 2), 9, Exec::Parallel).unwrap();
    let (obs, act) = (ds.observations.clone(), ds.actions.clone());
    let step = |density: &dyn DensityEstimator, lambda: f64| {
        let g = Guardian::with_config(density, PenaltyConfig::new(0.0, lambda).unwrap()).unwrap();
        PenalizedModel::new(&ens, Some(g))
            .unwrap()
            .penalized_step(&obs, &act, &mut SeedStream::new(1).rng())
            .unwrap()
    };
    let dense = Constant { log_p: 1e6, dim: 4 };
    let s = step(&dense, 0.5);
    assert_eq!(s.reward, s.model_reward);

    let empty = Constant { log_p: -1e6, dim: 4 };
    let s = step(&empty, 0.4);
    let penalty = s.penalty.as_ref().unwrap();
    assert!(penalty.u.iter().all(|&u| 1.0 - u < 1e-12));
    for (rt, rh) in s.reward.iter().zip(&s.model_reward) {
        assert!((rt - (rh - 0.4)).abs() < 1e-12);
    }

    let wrong = Constant { log_p: 0.0, dim: 3 };
    assert!(PenalizedModel::new(&ens, Some(Guardian::with_config(&wrong, PenaltyConfig::new(0.0, 0.1).unwrap()).unwrap())).is_err());
}
