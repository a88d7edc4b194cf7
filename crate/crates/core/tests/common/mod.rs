//! Shared fixtures for integration tests.
#![allow(dead_code)]

use gormpo_core::rng::SeedStream;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Two-component isotropic Gaussian mixture in the plane.
pub struct Mixture {
    pub weights: [f64; 2],
    pub means: [[f64; 2]; 2],
    pub std: f64,
}

pub const MIXTURE: Mixture = Mixture {
    weights: [0.4, 0.6],
    means: [[-1.0, -0.5], [1.0, 0.5]],
    std: 0.6,
};

impl Mixture {
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = SeedStream::new(seed).rng();
        let mut out = Array2::zeros((n, 2));
        for mut row in out.rows_mut() {
            let c = usize::from(rng.random::<f64>() >= self.weights[0]);
            for j in 0..2 {
                let e: f64 = StandardNormal.sample(&mut rng);
                row[j] = self.means[c][j] + self.std * e;
            }
        }
        out
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let var = self.std * self.std;
        let terms: Vec<f64> = (0..2)
            .map(|c| {
                let sq: f64 = (0..2).map(|j| (x[j] - self.means[c][j]).powi(2)).sum();
                self.weights[c].ln() - sq / (2.0 * var) - (2.0 * std::f64::consts::PI * var).ln()
            })
            .collect();
        let m = terms[0].max(terms[1]);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    pub fn mean_log_pdf(&self, x: &Array2<f64>) -> f64 {
        x.rows().into_iter().map(|r| self.log_pdf(r.as_slice().unwrap())).sum::<f64>() / x.nrows() as f64
    }
}

/// Regular grid over `[lo, hi]²` with the cell area.
pub fn grid(lo: f64, hi: f64, per_side: usize) -> (Array2<f64>, f64) {
    let h = (hi - lo) / per_side as f64;
    let pts = Array2::from_shape_fn((per_side * per_side, 2), |(i, j)| {
        let k = if j == 0 { i / per_side } else { i % per_side };
        lo + (k as f64 + 0.5) * h
    });
    (pts, h * h)
}

pub fn standard_normal(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = SeedStream::new(seed).rng();
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
}

pub fn gmm_realnvp_config() -> gormpo_core::density::RealNvpConfig {
    use gormpo_core::density::RealNvpConfig;
    RealNvpConfig {
        hidden: vec![64, 64],
        train: gormpo_core::train::TrainConfig {
            epochs: 200,
            ..RealNvpConfig::default().train
        },
        ..RealNvpConfig::default()
    }
}

pub fn gmm_cnf_config() -> gormpo_core::density::CnfConfig {
    use gormpo_core::density::CnfConfig;
    CnfConfig {
        hidden: vec![32, 32],
        train_steps: 6,
        train: gormpo_core::train::TrainConfig {
            epochs: 40,
            batch_size: 256,
            ..CnfConfig::default().train
        },
        ..CnfConfig::default()
    }
}
