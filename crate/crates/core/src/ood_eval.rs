//! Detector scoring for the `(s′, a)` density estimators.
//!
//! Scores are log-densities; low means out of distribution. AUC is the
//! probability that a random OOD score falls below a random ID score.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::OodBenchmark;
use crate::density::{AnyEstimator, DensityEstimator, EstimatorKind};
use crate::error::{Error, Result};
use crate::exec::Exec;

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| x.is_nan()) {
        Some(i) => Err(Error::Param(format!("{name} score {i} is NaN"))),
        None => Ok(()),
    }
}

/// Mid-ranks (1-based) of `values` in ascending order.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// `P(ood < id) + ½ P(ood = id)` via the Mann–Whitney rank sum.
pub fn roc_auc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Param("AUC needs at least one ID and one OOD score".into()));
    }
    check_finite("ID", id_scores)?;
    check_finite("OOD", ood_scores)?;
    let all: Vec<f64> = id_scores.iter().chain(ood_scores).copied().collect();
    let ranks = mid_ranks(&all);
    let (n_id, n_ood) = (id_scores.len() as f64, ood_scores.len() as f64);
    let rank_sum: f64 = ranks[..id_scores.len()].iter().sum();
    Ok((rank_sum - n_id * (n_id + 1.0) / 2.0) / (n_id * n_ood))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
}

/// Flags OOD when `score < tau`. `labels[i]` is true for OOD rows.
pub fn classification_metrics(scores: &[f64], labels: &[bool], tau: f64) -> Result<ClassMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Param(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    check_finite("detector", scores)?;
    let n_ood = labels.iter().filter(|&&l| l).count();
    let n_id = labels.len() - n_ood;
    if n_ood == 0 || n_id == 0 {
        return Err(Error::Param("labels must contain both ID and OOD rows".into()));
    }
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&s, &ood) in scores.iter().zip(labels) {
        match (ood, s < tau) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok(ClassMetrics {
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        tpr: tp as f64 / n_ood as f64,
        tnr: tn as f64 / n_id as f64,
    })
}

/// Counts of ID and OOD scores over shared, equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub lo: f64,
    pub hi: f64,
    pub id: Vec<u64>,
    pub ood: Vec<u64>,
}

impl ScoreHistogram {
    pub fn new(id: &[f64], ood: &[f64], bins: usize) -> Self {
        let (lo, hi) = id
            .iter()
            .chain(ood)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
        let count = |xs: &[f64]| {
            let mut c = vec![0u64; bins];
            for &x in xs {
                c[bin_index(x, lo, hi, bins)] += 1;
            }
            c
        };
        Self { lo, hi, id: count(id), ood: count(ood) }
    }

    pub fn bins(&self) -> usize {
        self.id.len()
    }
}

fn bin_index(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

const REPORT_BINS: usize = 32;

/// One `(estimator, μ, seed)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub estimator: EstimatorKind,
    pub mu: f64,
    pub auc: f64,
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub tau: f64,
    pub seed: u64,
    #[serde(skip)]
    pub histogram: Option<ScoreHistogram>,
}

/// Scores one benchmark with a calibrated estimator.
pub fn evaluate_detector(model: &dyn DensityEstimator, bench: &OodBenchmark, seed: u64, exec: Exec) -> Result<OodRow> {
    let tau = model
        .threshold()
        .ok_or_else(|| Error::Param(format!("{} has no calibrated threshold", model.kind())))?;
    let scores = model.log_prob_with(&bench.inputs, exec)?.to_vec();
    let (id, ood) = bench.partition(&scores);
    let m = classification_metrics(&scores, &bench.labels, tau)?;
    Ok(OodRow {
        estimator: model.kind(),
        mu: bench.shift_mu,
        auc: roc_auc(&id, &ood)?,
        accuracy: m.accuracy,
        tpr: m.tpr,
        tnr: m.tnr,
        tau,
        seed,
        histogram: Some(ScoreHistogram::new(&id, &ood, REPORT_BINS)),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub rows: Vec<OodRow>,
}

impl OodReport {
    pub fn rows_for(&self, kind: EstimatorKind) -> impl Iterator<Item = &OodRow> {
        self.rows.iter().filter(move |r| r.estimator == kind)
    }

    pub fn extend(&mut self, other: OodReport) {
        self.rows.extend(other.rows);
    }

    /// Columns: estimator, mu, auc, accuracy, tpr, tnr, tau, seed.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(std::io::Error::from)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let rows = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<Vec<OodRow>, _>>()
            .map_err(|e| Error::Format {
                field: "ood csv".into(),
                reason: e.to_string(),
            })?;
        Ok(Self { rows })
    }

    /// Kendall trend of AUC against μ for one estimator, pooled over seeds.
    pub fn auc_trend(&self, kind: EstimatorKind) -> Result<KendallTest> {
        let (mu, auc): (Vec<f64>, Vec<f64>) = self.rows_for(kind).map(|r| (r.mu, r.auc)).unzip();
        kendall_tau(&mu, &auc)
    }
}

/// Every estimator against the benchmark for every μ. Rows are ordered by
/// estimator, then μ.
pub fn ood_sweep(
    estimators: &[&dyn DensityEstimator],
    benchmark: impl Fn(f64) -> Result<OodBenchmark>,
    mus: &[f64],
    seed: u64,
    exec: Exec,
) -> Result<OodReport> {
    let benches = mus.iter().map(|&mu| benchmark(mu)).collect::<Result<Vec<_>>>()?;
    let cells = estimators.len() * benches.len();
    let rows = exec.try_map(cells, |c| {
        let (e, b) = (c / benches.len(), c % benches.len());
        evaluate_detector(estimators[e], &benches[b], seed, Exec::Sequential)
    })?;
    Ok(OodReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KendallTest {
    /// Tau-b, corrected for ties in either variable.
    pub tau: f64,
    /// Normal approximation to the concordance statistic under independence.
    pub z: f64,
    /// One-sided p-value for a positive association.
    pub p_value: f64,
}

/// Kendall's tau-b with the tie-corrected null variance of S.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<KendallTest> {
    if x.len() != y.len() {
        return Err(Error::Param(format!("{} x values for {} y values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Param("Kendall's tau needs at least 3 pairs".into()));
    }
    check_finite("x", x)?;
    check_finite("y", y)?;
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).signum() as i64 * i64::from(x[i] != x[j]);
            let dy = (y[i] - y[j]).signum() as i64 * i64::from(y[i] != y[j]);
            s += dx * dy;
        }
    }
    let groups = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v.chunk_by(|a, b| a == b).map(|g| g.len() as f64).collect::<Vec<f64>>()
    };
    let (tx, ty) = (groups(x), groups(y));
    let nf = n as f64;
    let n0 = nf * (nf - 1.0) / 2.0;
    let pairs = |g: &[f64]| g.iter().map(|t| t * (t - 1.0) / 2.0).sum::<f64>();
    let (n1, n2) = (pairs(&tx), pairs(&ty));
    let denom = ((n0 - n1) * (n0 - n2)).sqrt();
    let tau = if denom > 0.0 { s as f64 / denom } else { 0.0 };

    let sum = |g: &[f64], f: &dyn Fn(f64) -> f64| g.iter().map(|&t| f(t)).sum::<f64>();
    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let vt = sum(&tx, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let vu = sum(&ty, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let v1 = sum(&tx, &|t| t * (t - 1.0)) * sum(&ty, &|t| t * (t - 1.0)) / (2.0 * nf * (nf - 1.0));
    let v2 = sum(&tx, &|t| t * (t - 1.0) * (t - 2.0)) * sum(&ty, &|t| t * (t - 1.0) * (t - 2.0)) / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
    let var = (v0 - vt - vu) / 18.0 + v1 + v2;
    let z = if var > 0.0 { s as f64 / var.sqrt() } else { 0.0 };
    Ok(KendallTest {
        tau,
        z,
        p_value: 0.5 * libm::erfc(z / std::f64::consts::SQRT_2),
    })
}

/// Sample skewness `m3 / m2^1.5` and excess kurtosis `m4 / m2² − 3`.
pub fn moments(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::Param("moments need at least 2 samples".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let central = |p: i32| xs.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / n;
    let m2 = central(2);
    if m2 <= 0.0 {
        return Err(Error::Param("moments of a constant sample".into()));
    }
    Ok((central(3) / m2.powf(1.5), central(4) / (m2 * m2) - 3.0))
}

/// `KL(P ‖ Q)` between histograms of `p` and `q` over shared bins, with
/// `smoothing` added to every bin probability before renormalizing.
pub fn histogram_kl(p: &[f64], q: &[f64], bins: usize, smoothing: f64) -> Result<f64> {
    if p.is_empty() || q.is_empty() || bins == 0 {
        return Err(Error::Param("histogram KL needs samples on both sides and at least one bin".into()));
    }
    let h = ScoreHistogram::new(p, q, bins);
    let probs = |c: &[u64]| {
        let total = c.iter().sum::<u64>() as f64;
        let raw: Vec<f64> = c.iter().map(|&k| k as f64 / total + smoothing).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(move |v| v / z)
    };
    Ok(probs(&h.id).zip(probs(&h.ood)).map(|(a, b)| a * (a / b).ln()).sum())
}

pub const NOISE_BINS: usize = 64;
pub const NOISE_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDiagnostics {
    pub timestep: usize,
    /// Moments of the pooled ID predicted-noise components.
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// `KL(ID ‖ OOD)` of the pooled components.
    pub kl_divergence: f64,
}

/// Predicted noise at the mid-schedule step `K/2` for ID and OOD inputs.
pub fn ddpm_noise_diagnostics(model: &AnyEstimator, id_pairs: &Array2<f64>, ood_pairs: &Array2<f64>, seed: u64) -> Result<NoiseDiagnostics> {
    let AnyEstimator::Ddpm(ddpm) = model else {
        return Err(Error::Param(format!("noise diagnostics need a diffusion model, got {}", model.kind())));
    };
    let k = (ddpm.schedule().len() / 2).max(1);
    let id = ddpm.predict_noise(id_pairs, k, seed)?.into_raw_vec_and_offset().0;
    let ood = ddpm.predict_noise(ood_pairs, k, seed.wrapping_add(1))?.into_raw_vec_and_offset().0;
    let (skewness, excess_kurtosis) = moments(&id)?;
    Ok(NoiseDiagnostics {
        timestep: k,
        skewness,
        excess_kurtosis,
        kl_divergence: histogram_kl(&id, &ood, NOISE_BINS, NOISE_SMOOTHING)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn pairwise_auc(id: &[f64], ood: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in id {
            for &b in ood {
                s += if b < a { 1.0 } else if b == a { 0.5 } else { 0.0 };
            }
        }
        s / (id.len() * ood.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[3.0, 2.0], &[1.0, 2.0]).unwrap(), 0.875);
        assert_eq!(roc_auc(&[5.0, 6.0, 7.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
        assert!(roc_auc(&[], &[1.0]).is_err());
        assert!(roc_auc(&[1.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn threshold_extremes() {
        let scores = [1.0, 2.0, 3.0, 4.0];
        let labels = [true, false, true, false];
        let low = classification_metrics(&scores, &labels, 0.0).unwrap();
        assert_eq!((low.tpr, low.tnr), (0.0, 1.0));
        let high = classification_metrics(&scores, &labels, 10.0).unwrap();
        assert_eq!((high.tpr, high.tnr), (1.0, 0.0));
        assert!(classification_metrics(&scores, &[false; 4], 1.0).is_err());
    }

    #[test]
    fn one_percent_threshold_passes_fresh_id_data() {
        let mut rng = SeedStream::new(0).rng();
        let mut draw = |n| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
        let (val, fresh) = (draw(20_000), draw(20_000));
        let tau = crate::density::percentile(&val, 1.0);
        let labels: Vec<bool> = (0..fresh.len() + 1).map(|i| i == fresh.len()).collect();
        let scores: Vec<f64> = fresh.iter().copied().chain([f64::NEG_INFINITY]).collect();
        let m = classification_metrics(&scores, &labels, tau).unwrap();
        assert!((m.tnr - 0.99).abs() <= 0.02, "TNR {}", m.tnr);
    }

    #[test]
    fn kendall_matches_hand_values() {
        let t = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.tau, 1.0);
        // S = 6, var = 4·3·13 / 18.
        assert!((t.z - 6.0 / (156.0f64 / 18.0).sqrt()).abs() < 1e-12);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().tau, -1.0);
        // S = 2 from two concordant pairs; one pair tied in x, none in y.
        let t = kendall_tau(&[1.0, 1.0, 2.0], &[1.0, 3.0, 4.0]).unwrap();
        assert!((t.tau - 2.0 / (2.0f64 * 3.0).sqrt()).abs() < 1e-12);
        let strong = kendall_tau(&(0..30).map(f64::from).collect::<Vec<_>>(), &(0..30).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert!(strong.p_value < 1e-6);
    }

    #[test]
    fn standard_normal_noise_has_null_moments() {
        let mut rng = SeedStream::new(1).rng();
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (skew, kurt) = moments(&xs).unwrap();
        let nf = n as f64;
        assert!(skew.abs() < 3.0 * (6.0 / nf).sqrt(), "skewness {skew}");
        assert!(kurt.abs() < 3.0 * (24.0 / nf).sqrt(), "excess kurtosis {kurt}");
        assert_eq!(histogram_kl(&xs, &xs, NOISE_BINS, NOISE_SMOOTHING).unwrap(), 0.0);
        let shifted: Vec<f64> = xs.iter().map(|x| x + 1.0).collect();
        assert!(histogram_kl(&xs, &shifted, NOISE_BINS, NOISE_SMOOTHING).unwrap() > 0.3);
    }

    #[test]
    fn diagnostics_reject_other_estimators() {
        let kde = AnyEstimator::new(EstimatorKind::Kde, 2, &Default::default());
        let x = Array2::zeros((3, 2));
        assert!(matches!(ddpm_noise_diagnostics(&kde, &x, &x, 0), Err(Error::Param(_))));
    }

    #[test]
    fn csv_round_trip() {
        let report = OodReport {
            rows: vec![OodRow {
                estimator: EstimatorKind::RealNvp,
                mu: 1.5,
                auc: 0.93,
                accuracy: 0.8,
                tpr: 0.7,
                tnr: 0.99,
                tau: -4.25,
                seed: 3,
                histogram: None,
            }],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("estimator,mu,auc,accuracy,tpr,tnr,tau,seed\nrealnvp,1.5,"));
        assert_eq!(OodReport::read_csv(&text).unwrap(), report);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_enumeration(
            id in prop::collection::vec(-5i32..5, 1..25),
            ood in prop::collection::vec(-5i32..5, 1..25),
        ) {
            let id: Vec<f64> = id.into_iter().map(f64::from).collect();
            let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
            let auc = roc_auc(&id, &ood).unwrap();
            prop_assert!((auc - pairwise_auc(&id, &ood)).abs() < 1e-12);
            prop_assert!((auc + roc_auc(&ood, &id).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn metrics_are_rank_invariant(seed in 0u64..1000, tau in -2.0f64..2.0) {
            let mut rng = SeedStream::new(seed).rng();
            let scores: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
            let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
            let f = |x: f64| x.exp() * 2.0 + x.powi(3);
            let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            let (id, ood): (Vec<_>, Vec<_>) = (0..40).partition(|&i| !labels[i]);
            let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            prop_assert_eq!(roc_auc(&pick(&scores, &id), &pick(&scores, &ood)).unwrap(), roc_auc(&pick(&mapped, &id), &pick(&mapped, &ood)).unwrap());
            let a = classification_metrics(&scores, &labels, tau).unwrap();
            let b = classification_metrics(&mapped, &labels, f(tau)).unwrap();
            prop_assert_eq!(a, b);
            let (n_ood, n_id) = (ood.len() as f64, id.len() as f64);
            prop_assert!((a.accuracy - (a.tpr * n_ood + a.tnr * n_id) / (n_ood + n_id)).abs() < 1e-15);
        }
    }
}
