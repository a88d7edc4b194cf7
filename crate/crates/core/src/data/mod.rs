//! Offline datasets: collection, splitting, sparsification, OOD benchmarks,
//! normalization, and persistence.

mod dataset;
mod ops;

pub use dataset::{denormalize, normalize, NormStats, OfflineDataset};
pub use ops::{collect_offline, make_ood, sparsify, split_trajectories, OodBenchmark, Region, SparsifyReport};

use ndarray::Array2;
use rand::Rng;

/// Adds `U(−w, w)` to the given columns, spreading integer-valued actions over
/// unit-width bins so a continuous density can be fit to them.
pub fn dequantize(x: &Array2<f64>, columns: std::ops::Range<usize>, half_width: &[f64], rng: &mut impl Rng) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for (k, c) in columns.clone().enumerate() {
            let w = half_width[k];
            row[c] += rng.random_range(-w..=w);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::mdp::{PdController, PointMass, ToyWean, WeaningClinician};
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn toywean(n: usize, seed: u64) -> OfflineDataset {
        collect_offline(&ToyWean::default(), &WeaningClinician::default(), n, seed, Exec::Parallel).unwrap()
    }

    /// `n` trajectories of length 3; trajectory `t` has reward `t` at every step.
    fn synthetic(n: usize) -> OfflineDataset {
        let rows = 3 * n;
        let rewards = Array1::from_shape_fn(rows, |i| (i / 3) as f64);
        OfflineDataset::new(
            Array2::zeros((rows, 2)),
            Array2::ones((rows, 1)),
            rewards,
            Array2::zeros((rows, 2)),
            (0..rows).map(|i| i % 3 == 2).collect(),
            (0..n).map(|t| 3 * t).collect(),
        )
        .unwrap()
    }

    #[test]
    fn collection_accounting() {
        let ds = toywean(1, 0);
        assert_eq!(ds.len(), 36);
        assert_eq!(ds.trajectory_starts, vec![0]);
        let ds = toywean(7, 0);
        assert_eq!(ds.terminals.iter().filter(|&&t| t).count(), 7);
        assert_eq!(ds, toywean(7, 0));
        assert_eq!(
            collect_offline(&ToyWean::default(), &WeaningClinician::default(), 7, 0, Exec::Sequential).unwrap(),
            ds
        );
        let pm = collect_offline(&PointMass::default(), &PdController::default(), 2, 1, Exec::Parallel).unwrap();
        assert_eq!(pm.len(), 400);
        assert_eq!(pm.trajectory_starts, vec![0, 200]);
    }

    #[test]
    fn sparsify_bookkeeping() {
        let ds = synthetic(100);
        let region = Region {
            reward_min: 45.0,
            reward_max: 1000.0,
            anorm_min: 0.0,
            anorm_max: 10.0,
        };
        let (same, rep) = sparsify(&ds, &region, 0.0, 1).unwrap();
        assert_eq!(same, ds);
        assert_eq!(rep.n_in_region, 55);
        // 40% of an unsafe region holding 55% of trajectories is 22% of the dataset.
        let (out, rep) = sparsify(&ds, &region, 0.4, 1).unwrap();
        assert_eq!(rep.n_dropped, 22);
        assert!((rep.dropped_fraction - 0.22).abs() < 1e-12);
        assert_eq!(out.n_trajectories(), 78);
        // Trajectories outside the region all survive.
        let kept: std::collections::BTreeSet<i64> = out.rewards.iter().map(|&r| r as i64).collect();
        assert!((0..45).all(|t| kept.contains(&t)));

        let everything = Region {
            reward_min: -1.0,
            ..region
        };
        assert!(sparsify(&ds, &everything, 1.0, 1).is_err());
        let nothing = Region {
            reward_min: 500.0,
            ..region
        };
        let (unchanged, rep) = sparsify(&ds, &nothing, 0.5, 1).unwrap();
        assert_eq!(unchanged, ds);
        assert!(rep.warning.is_some());
    }

    #[test]
    fn ood_benchmark_shape_and_degenerate_shift() {
        let ds = toywean(20, 2);
        let b = make_ood(&ds, 0.0, 5, 0.0, 3).unwrap();
        let n = b.inputs.nrows() / 2;
        assert_eq!(n, 5 * 36);
        assert_eq!(b.n_ood(), n);
        assert!(b.labels[..n].iter().all(|&l| !l));
        assert_eq!(b.inputs.slice(ndarray::s![..n, ..]), b.inputs.slice(ndarray::s![n.., ..]));
        assert!(make_ood(&ds, 1.0, 21, 0.1, 0).is_err());
        assert!(make_ood(&ds, -1.0, 5, 0.1, 0).is_err());
    }

    #[test]
    fn raw_benchmark_normalizes_like_the_normalized_dataset() {
        let raw = toywean(20, 5);
        let z = normalize(&raw, None).unwrap();
        let stats = z.norm_stats.as_ref().unwrap();
        let a = make_ood(&raw, 0.0, 5, 0.0, 3).unwrap().normalized(stats).unwrap();
        let b = make_ood(&z, 0.0, 5, 0.0, 3).unwrap();
        assert_eq!(a.labels, b.labels);
        assert!(a.inputs.iter().zip(&b.inputs).all(|(x, y)| (x - y).abs() < 1e-12));
        let shifted = make_ood(&raw, 1.0, 5, 0.0, 3).unwrap().normalized(stats).unwrap();
        let n = shifted.inputs.nrows() / 2;
        let step = &shifted.inputs.row(n) - &shifted.inputs.row(0);
        let expect = stats.obs_std.iter().chain(&stats.act_std).map(|s| 1.0 / s);
        assert!(step.iter().zip(expect).all(|(d, e)| (d - e).abs() < 1e-9));
    }

    #[test]
    fn normalization_round_trip_and_constant_columns() {
        let ds = toywean(10, 4);
        let mut with_const = ds.clone();
        with_const.observations.column_mut(1).fill(3.0);
        with_const.next_observations.column_mut(1).fill(3.0);
        let n = normalize(&with_const, Some(2.0)).unwrap();
        assert!(n.observations.column(1).iter().all(|&v| v == 0.0));
        let back = n.denormalize().unwrap();
        let err = (&back.observations - &with_const.observations)
            .iter()
            .chain((&back.actions - &with_const.actions).iter())
            .fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(err < 1e-10, "{err}");
        assert!(n.rewards.iter().all(|r| r.abs() <= 2.0));
    }

    #[test]
    fn reward_clip_applies_to_large_z_scores() {
        let stats = NormStats {
            obs_mean: array![0.0],
            obs_std: array![1.0],
            act_mean: array![0.0],
            act_std: array![1.0],
            rew_mean: 1.0,
            rew_std: 2.0,
            reward_clip: Some(2.0),
        };
        assert_eq!(stats.normalize_reward(1.0 + 3.5 * 2.0), 2.0);
        assert_eq!(stats.normalize_reward(1.0 - 3.5 * 2.0), -2.0);
        assert_eq!(stats.normalize_reward(2.0), 0.5);
    }

    #[test]
    fn save_load_round_trip_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = normalize(&toywean(5, 5), Some(2.0)).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(OfflineDataset::load(&path).unwrap(), ds);

        let raw = toywean(3, 6);
        raw.save(&path).unwrap();
        assert_eq!(OfflineDataset::load(&path).unwrap(), raw);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(OfflineDataset::load(&path).is_err());

        let mut missing = crate::container::Container::default();
        let full = raw.to_container();
        for name in full.names().filter(|&n| n != "rewards") {
            missing.insert(name, full.entry(name).unwrap().clone());
        }
        let err = OfflineDataset::from_container(&missing).unwrap_err();
        assert!(err.to_string().contains("rewards"), "{err}");
    }

    #[test]
    fn split_covers_every_trajectory_once() {
        let ds = toywean(20, 8);
        let parts = split_trajectories(&ds, &[0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!(parts.iter().map(OfflineDataset::n_trajectories).sum::<usize>(), 20);
        assert_eq!(parts.iter().map(OfflineDataset::len).sum::<usize>(), ds.len());
        assert_eq!(parts[0].n_trajectories(), 12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sparsify_removes_exact_count(n in 2usize..60, cut in 0usize..60, frac in 0.0f64..1.0, seed in 0u64..1000) {
            let ds = synthetic(n);
            let region = Region { reward_min: cut as f64, reward_max: 1e9, anorm_min: 0.0, anorm_max: 10.0 };
            let n_in = n.saturating_sub(cut);
            let expected = (frac * n_in as f64).round() as usize;
            match sparsify(&ds, &region, frac, seed) {
                Ok((out, rep)) => {
                    prop_assert_eq!(rep.n_dropped, if n_in == 0 { 0 } else { expected });
                    prop_assert_eq!(out.n_trajectories(), n - rep.n_dropped);
                    let kept: std::collections::BTreeSet<usize> = out.rewards.iter().map(|&r| r as usize).collect();
                    prop_assert!((0..cut.min(n)).all(|t| kept.contains(&t)));
                }
                Err(_) => prop_assert!(expected == n),
            }
        }

        #[test]
        fn ood_labels_match_rows(mu in 0.0f64..3.0, seed in 0u64..100) {
            let ds = synthetic(8);
            let b = make_ood(&ds, mu, 3, 0.1, seed).unwrap();
            let n = b.inputs.nrows() / 2;
            prop_assert_eq!(n, 9);
            prop_assert!(b.labels.iter().enumerate().all(|(i, &l)| l == (i >= n)));
        }
    }
}
