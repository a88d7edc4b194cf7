use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{check_input, floor, header, read_header, DensityEstimator, EstimatorKind, KdTree, EVAL_CHUNK, LOG_DENSITY_FLOOR};
use crate::container::Container;
use crate::error::{format_err, Error, Result};
use crate::exec::Exec;
use crate::train::FitReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdeConfig {
    pub bandwidth: f64,
    pub k_neighbors: usize,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            bandwidth: 1.0,
            k_neighbors: 100,
        }
    }
}

/// Gaussian KDE restricted to the `k` nearest reference points.
///
/// Columns that are constant over the reference set are dropped from the
/// distance; their kernel factor would be identical for every reference point.
#[derive(Debug, Clone)]
pub struct Kde {
    config: KdeConfig,
    input_dim: usize,
    active: Vec<usize>,
    tree: Option<KdTree>,
    tau: Option<f64>,
}

impl Kde {
    pub fn new(input_dim: usize, config: KdeConfig) -> Self {
        Self {
            config,
            input_dim,
            active: (0..input_dim).collect(),
            tree: None,
            tau: None,
        }
    }

    pub fn config(&self) -> &KdeConfig {
        &self.config
    }

    /// Stores the reference points and builds the neighbor index.
    pub fn fit_points(&mut self, points: &Array2<f64>) -> Result<()> {
        if self.config.bandwidth <= 0.0 || !self.config.bandwidth.is_finite() {
            return Err(Error::Param(format!("bandwidth {} must be positive", self.config.bandwidth)));
        }
        if self.config.k_neighbors == 0 {
            return Err(Error::Param("k_neighbors must be at least 1".into()));
        }
        if points.nrows() == 0 || points.ncols() != self.input_dim {
            return Err(Error::Param(format!(
                "reference set must be non-empty with {} columns, got {:?}",
                self.input_dim,
                points.dim()
            )));
        }
        self.active = (0..self.input_dim)
            .filter(|&d| {
                let col = points.column(d);
                let first = col[0];
                points.nrows() < 2 || col.iter().any(|&v| v != first)
            })
            .collect();
        self.tree = Some(KdTree::build(points.select(Axis(1), &self.active)));
        Ok(())
    }

    pub fn n_reference(&self) -> usize {
        self.tree.as_ref().map_or(0, KdTree::len)
    }

    fn log_normalizer(&self) -> f64 {
        let h = self.config.bandwidth;
        -0.5 * self.input_dim as f64 * (2.0 * std::f64::consts::PI * h * h).ln() - (self.n_reference() as f64).ln()
    }

    fn log_prob_row(&self, tree: &KdTree, row: ndarray::ArrayView1<'_, f64>, log_norm: f64) -> f64 {
        let q = row.select(Axis(0), &self.active);
        let inv = 1.0 / (2.0 * self.config.bandwidth * self.config.bandwidth);
        let sum: f64 = tree
            .nearest(q.view(), self.config.k_neighbors)
            .iter()
            .map(|(d2, _)| (-d2 * inv).exp())
            .sum();
        if sum > 0.0 {
            floor(sum.ln() + log_norm)
        } else {
            LOG_DENSITY_FLOOR
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (input_dim, tau, fitted) = read_header(c, EstimatorKind::Kde)?;
        let config: KdeConfig = super::config_from_container(c)?;
        let mut kde = Kde::new(input_dim, config);
        kde.tau = tau;
        if fitted {
            kde.active = c.get_u64("active")?.iter().map(|&d| d as usize).collect();
            if kde.active.iter().any(|&d| d >= input_dim) {
                return Err(format_err("active", "column index out of range"));
            }
            let pts = c.get_array2("reference_points")?;
            if pts.ncols() != kde.active.len() {
                return Err(format_err("reference_points", "width does not match active columns"));
            }
            kde.tree = Some(KdTree::build(pts));
        }
        Ok(kde)
    }
}

impl DensityEstimator for Kde {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Kde
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn is_fitted(&self) -> bool {
        self.tree.is_some()
    }

    fn fit(&mut self, train: &Array2<f64>, val: &Array2<f64>, _seed: u64) -> Result<FitReport> {
        self.fit_points(train)?;
        let best_val = if val.nrows() > 0 {
            -self.log_prob(val)?.mean().unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        Ok(FitReport {
            curve: Vec::new(),
            best_epoch: 0,
            best_val,
        })
    }

    fn log_prob_with(&self, x: &Array2<f64>, exec: Exec) -> Result<Array1<f64>> {
        check_input(self, x)?;
        let tree = self.tree.as_ref().expect("checked fitted");
        let log_norm = self.log_normalizer();
        let chunks = exec.map_chunks(x.nrows(), EVAL_CHUNK, |_, s, e| {
            (s..e).map(|i| self.log_prob_row(tree, x.row(i), log_norm)).collect::<Vec<_>>()
        });
        Ok(Array1::from(chunks.concat()))
    }

    fn threshold(&self) -> Option<f64> {
        self.tau
    }

    fn set_threshold(&mut self, tau: f64) {
        self.tau = Some(tau);
    }

    fn to_container(&self) -> Container {
        let mut c = header(EstimatorKind::Kde, self.input_dim, self.tau, self.is_fitted());
        super::config_to_container(&mut c, &self.config);
        if let Some(tree) = &self.tree {
            c.put_u64("active", self.active.iter().map(|&d| d as u64).collect());
            c.put_array2("reference_points", tree.points());
        }
        c
    }
}
