mod common;

use common::standard_normal;
use gormpo_core::density::*;
use gormpo_core::train::TrainConfig;
use gormpo_core::Exec;
use ndarray::Array2;

fn analytic_normal(x: &Array2<f64>) -> Vec<f64> {
    let d = x.ncols() as f64;
    x.rows()
        .into_iter()
        .map(|r| -0.5 * r.dot(&r) - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_err(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64).sqrt()
}

fn small_vae() -> Vae {
    let mut vae = Vae::new(
        4,
        VaeConfig {
            latent_dim: 4,
            hidden: vec![64, 64],
            iwae_samples: 64,
            train: TrainConfig {
                epochs: 60,
                ..VaeConfig::default().train
            },
            ..VaeConfig::default()
        },
    );
    vae.fit(&standard_normal(4000, 4, 1), &standard_normal(1000, 4, 2), 3).unwrap();
    vae
}

fn small_realnvp() -> RealNvp {
    let mut nvp = RealNvp::new(
        4,
        RealNvpConfig {
            hidden: vec![64, 64],
            ..RealNvpConfig::default()
        },
    );
    nvp.fit(&standard_normal(4000, 4, 1), &standard_normal(1000, 4, 2), 3).unwrap();
    nvp
}

#[test]
fn vae_and_realnvp_on_standard_normal() {
    let test = standard_normal(1000, 4, 4);
    let truth = mean(&analytic_normal(&test));

    let vae = small_vae();
    let iwae = vae.log_prob(&test).unwrap().to_vec();
    assert!((mean(&iwae) - truth).abs() < 0.3, "vae {} vs {truth}", mean(&iwae));

    let nvp = small_realnvp();
    let exact = nvp.log_prob(&test).unwrap().to_vec();
    assert!((mean(&exact) - truth).abs() < 0.1, "realnvp {} vs {truth}", mean(&exact));

    // IWAE bounds the VAE marginal from below; it should not beat an exact
    // well-fitted flow beyond sampling noise.
    let diff: Vec<f64> = iwae.iter().zip(&exact).map(|(a, b)| a - b).collect();
    assert!(mean(&diff) <= 3.0 * std_err(&diff), "iwae exceeds flow by {}", mean(&diff));
}

#[test]
fn iwae_is_a_tightening_stochastic_lower_bound() {
    let vae = small_vae();
    let x = standard_normal(50, 4, 5);
    let truth = mean(&analytic_normal(&x));
    let reps = |k: usize| -> Vec<f64> {
        (0..200)
            .map(|r| vae.iwae_log_prob(&x, k, 1000 + r, Exec::Parallel).unwrap().mean().unwrap())
            .collect()
    };
    let (k1, k64) = (reps(1), reps(64));
    assert!(mean(&k64) <= truth + 3.0 * std_err(&k64), "{} vs {truth}", mean(&k64));
    assert!(mean(&k64) >= mean(&k1));
}

#[test]
fn ddpm_separates_shifted_data() {
    let cfg = DdpmConfig {
        hidden: vec![64, 64],
        time_embed_dim: 16,
        n_steps: 200,
        n_strides: 20,
        train: TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            ..DdpmConfig::default().train
        },
        ..DdpmConfig::default()
    };
    for seed in 0..5 {
        let mut m = Ddpm::new(2, cfg.clone());
        m.fit(&standard_normal(1000, 2, 10 + seed), &standard_normal(200, 2, 20 + seed), seed).unwrap();
        let id = m.log_prob(&standard_normal(300, 2, 30 + seed)).unwrap().to_vec();
        let ood = m.log_prob(&(standard_normal(300, 2, 40 + seed) + 2.0)).unwrap().to_vec();
        let t = (mean(&id) - mean(&ood)) / (std_err(&id).powi(2) + std_err(&ood).powi(2)).sqrt();
        assert!(t > 3.0, "seed {seed}: Welch t = {t}");
    }
}

#[test]
fn ddpm_predicted_noise_is_gaussian_and_barely_shifts_under_perturbation() {
    let cfg = DdpmConfig {
        hidden: vec![64, 64],
        time_embed_dim: 16,
        n_steps: 200,
        n_strides: 20,
        train: TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            ..DdpmConfig::default().train
        },
        ..DdpmConfig::default()
    };
    let mut m = Ddpm::new(2, cfg);
    m.fit(&standard_normal(1000, 2, 50), &standard_normal(200, 2, 51), 0).unwrap();
    let model = AnyEstimator::Ddpm(m);
    let id = standard_normal(2000, 2, 52);
    let perturbed = &id + &(standard_normal(2000, 2, 53) * 0.1);
    let near = gormpo_core::ood_eval::ddpm_noise_diagnostics(&model, &id, &perturbed, 7).unwrap();
    // 4000 pooled components: standard errors ≈ 0.04 (skewness) and 0.08 (kurtosis).
    assert!(near.skewness.abs() < 0.15, "{near:?}");
    assert!(near.excess_kurtosis.abs() < 0.3, "{near:?}");
    assert!(near.kl_divergence < 0.1, "{near:?}");
    let far = gormpo_core::ood_eval::ddpm_noise_diagnostics(&model, &id, &(&id + 3.0), 7).unwrap();
    assert!(far.kl_divergence > near.kl_divergence, "{far:?} vs {near:?}");
}

#[test]
fn cnf_trained_on_mixture_is_step_converged() {
    let mut cnf = Cnf::new(2, common::gmm_cnf_config());
    cnf.fit(&common::MIXTURE.sample(2000, 1), &common::MIXTURE.sample(500, 2), 0).unwrap();
    let x = common::MIXTURE.sample(500, 3);
    let a = cnf.log_prob_steps(&x, 20, TraceMode::Auto, Exec::Parallel).unwrap();
    let b = cnf.log_prob_steps(&x, 40, TraceMode::Auto, Exec::Parallel).unwrap();
    assert!((&a - &b).iter().all(|d| d.abs() < 1e-3));
    let (z, _) = cnf.integrate(&x, 1.0, 0.0, 20, TraceMode::Auto, 0).unwrap();
    let (back, _) = cnf.integrate(&z, 0.0, 1.0, 20, TraceMode::Auto, 0).unwrap();
    assert!((&back - &x).iter().all(|d| d.abs() < 1e-4));
}

#[test]
fn calibration_contract() {
    let mut kde = Kde::new(2, KdeConfig::default());
    kde.fit(&standard_normal(2000, 2, 1), &standard_normal(10, 2, 2), 0).unwrap();
    let val = standard_normal(500, 2, 3);
    let cal = calibrate_threshold(&mut kde, &val).unwrap();
    assert_eq!(kde.threshold(), Some(cal.tau));
    assert!((0.0..=0.02).contains(&cal.fraction_below));
    assert!(cal.warning.is_none());
    assert!(calibrate_threshold(&mut kde, &standard_normal(50, 2, 4)).unwrap().warning.is_some());
}

#[test]
fn one_driver_serves_every_family() {
    let configs = EstimatorConfigs {
        vae: VaeConfig {
            latent_dim: 2,
            hidden: vec![16],
            train: TrainConfig { epochs: 2, ..Default::default() },
            ..Default::default()
        },
        realnvp: RealNvpConfig {
            hidden: vec![16],
            train: TrainConfig { epochs: 2, ..Default::default() },
            ..Default::default()
        },
        ddpm: DdpmConfig {
            hidden: vec![16],
            time_embed_dim: 8,
            n_steps: 20,
            n_strides: 5,
            train: TrainConfig { epochs: 2, ..Default::default() },
            ..Default::default()
        },
        cnf: CnfConfig {
            hidden: vec![16, 16],
            train_steps: 2,
            steps: 4,
            train: TrainConfig { epochs: 2, ..Default::default() },
            ..Default::default()
        },
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = (standard_normal(300, 3, 1), standard_normal(150, 3, 2));
    for kind in EstimatorKind::ALL {
        let mut m = AnyEstimator::new(kind, 3, &configs);
        assert!(m.log_prob(&val).is_err());
        m.fit(&train, &val, 7).unwrap();
        calibrate_threshold(&mut m, &val).unwrap();
        let path = dir.path().join(format!("{kind}.bin"));
        m.save(&path).unwrap();
        let back = AnyEstimator::load(&path).unwrap();
        assert_eq!(back.kind(), kind);
        assert_eq!(back.threshold(), m.threshold());
        assert_eq!(back.log_prob(&val).unwrap(), m.log_prob(&val).unwrap());
        assert!(m.log_prob(&val).unwrap().iter().all(|v| v.is_finite() && *v >= LOG_DENSITY_FLOOR));
    }
}
