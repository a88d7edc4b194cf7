//! Density estimators over `(s′, a)` rows.
//!
//! All five families implement [`DensityEstimator`]: fit on training rows with
//! a validation split, return per-row log-densities floored at
//! [`LOG_DENSITY_FLOOR`], and carry a threshold `τ` set by
//! [`calibrate_threshold`]. Scales differ between families; only `τ − log p`
//! is consumed downstream.

mod cnf;
mod ddpm;
mod kde;
mod kdtree;
mod realnvp;
mod vae;

pub use cnf::{Cnf, CnfConfig, TraceMode};
pub use ddpm::{Ddpm, DdpmConfig};
pub use kde::{Kde, KdeConfig};
pub use kdtree::KdTree;
pub use realnvp::{RealNvp, RealNvpConfig};
pub use vae::{Vae, VaeConfig};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{format_err, Error, Result};
use crate::exec::Exec;
use crate::train::FitReport;

/// Log-densities are never reported below this value.
pub const LOG_DENSITY_FLOOR: f64 = -1e6;

/// Rows per evaluation chunk; stochastic estimators key their noise on the chunk index.
pub(crate) const EVAL_CHUNK: usize = 256;

pub(crate) fn floor(lp: f64) -> f64 {
    if lp.is_nan() || lp < LOG_DENSITY_FLOOR {
        LOG_DENSITY_FLOOR
    } else {
        lp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Kde,
    Vae,
    RealNvp,
    Ddpm,
    Cnf,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Kde,
        EstimatorKind::Vae,
        EstimatorKind::RealNvp,
        EstimatorKind::Ddpm,
        EstimatorKind::Cnf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Kde => "kde",
            EstimatorKind::Vae => "vae",
            EstimatorKind::RealNvp => "realnvp",
            EstimatorKind::Ddpm => "ddpm",
            EstimatorKind::Cnf => "cnf",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown estimator `{s}` (expected kde, vae, realnvp, ddpm, cnf)")))
    }
}

pub trait DensityEstimator: Send + Sync {
    fn kind(&self) -> EstimatorKind;
    fn input_dim(&self) -> usize;
    fn is_fitted(&self) -> bool;

    /// Fits on `train`, early-stopping on `val`. Deterministic given `seed`.
    fn fit(&mut self, train: &Array2<f64>, val: &Array2<f64>, seed: u64) -> Result<FitReport>;

    /// Floored log-density of every row.
    fn log_prob_with(&self, x: &Array2<f64>, exec: Exec) -> Result<Array1<f64>>;

    fn log_prob(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        self.log_prob_with(x, Exec::default())
    }

    fn threshold(&self) -> Option<f64>;
    fn set_threshold(&mut self, tau: f64);

    /// Architecture, weights, and threshold.
    fn to_container(&self) -> Container;
}

pub(crate) fn check_input(model: &dyn DensityEstimator, x: &Array2<f64>) -> Result<()> {
    if !model.is_fitted() {
        return Err(Error::NotFitted(model.kind().name()));
    }
    if x.ncols() != model.input_dim() {
        return Err(Error::Param(format!(
            "{} expects {} input columns, got {}",
            model.kind(),
            model.input_dim(),
            x.ncols()
        )));
    }
    Ok(())
}

/// `q`-th percentile (0–100) with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub n_val: usize,
    pub fraction_below: f64,
    pub warning: Option<String>,
}

/// Sets `τ` to the 1st percentile of validation log-densities.
pub fn calibrate_threshold(model: &mut dyn DensityEstimator, val: &Array2<f64>) -> Result<Calibration> {
    if val.nrows() == 0 {
        return Err(Error::Param("empty validation set".into()));
    }
    let scores = model.log_prob(val)?;
    let scores = scores.as_slice().expect("contiguous");
    let tau = percentile(scores, 1.0);
    model.set_threshold(tau);
    let below = scores.iter().filter(|&&s| s < tau).count();
    Ok(Calibration {
        tau,
        n_val: scores.len(),
        fraction_below: below as f64 / scores.len() as f64,
        warning: (scores.len() < 100).then(|| format!("only {} validation points for a 1% threshold", scores.len())),
    })
}

/// Any estimator family behind one value type.
pub enum AnyEstimator {
    Kde(Kde),
    Vae(Vae),
    RealNvp(RealNvp),
    Ddpm(Ddpm),
    Cnf(Cnf),
}

impl fmt::Debug for AnyEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AnyEstimator({})", self.as_dyn().kind())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfigs {
    pub kde: KdeConfig,
    pub vae: VaeConfig,
    pub realnvp: RealNvpConfig,
    pub ddpm: DdpmConfig,
    pub cnf: CnfConfig,
}

impl AnyEstimator {
    pub fn new(kind: EstimatorKind, input_dim: usize, configs: &EstimatorConfigs) -> Self {
        match kind {
            EstimatorKind::Kde => AnyEstimator::Kde(Kde::new(input_dim, configs.kde.clone())),
            EstimatorKind::Vae => AnyEstimator::Vae(Vae::new(input_dim, configs.vae.clone())),
            EstimatorKind::RealNvp => AnyEstimator::RealNvp(RealNvp::new(input_dim, configs.realnvp.clone())),
            EstimatorKind::Ddpm => AnyEstimator::Ddpm(Ddpm::new(input_dim, configs.ddpm.clone())),
            EstimatorKind::Cnf => AnyEstimator::Cnf(Cnf::new(input_dim, configs.cnf.clone())),
        }
    }

    pub fn as_dyn(&self) -> &dyn DensityEstimator {
        match self {
            AnyEstimator::Kde(m) => m,
            AnyEstimator::Vae(m) => m,
            AnyEstimator::RealNvp(m) => m,
            AnyEstimator::Ddpm(m) => m,
            AnyEstimator::Cnf(m) => m,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn DensityEstimator {
        match self {
            AnyEstimator::Kde(m) => m,
            AnyEstimator::Vae(m) => m,
            AnyEstimator::RealNvp(m) => m,
            AnyEstimator::Ddpm(m) => m,
            AnyEstimator::Cnf(m) => m,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind: EstimatorKind = c
            .get_str("estimator")?
            .parse()
            .map_err(|e: Error| format_err("estimator", e.to_string()))?;
        Ok(match kind {
            EstimatorKind::Kde => AnyEstimator::Kde(Kde::from_container(c)?),
            EstimatorKind::Vae => AnyEstimator::Vae(Vae::from_container(c)?),
            EstimatorKind::RealNvp => AnyEstimator::RealNvp(RealNvp::from_container(c)?),
            EstimatorKind::Ddpm => AnyEstimator::Ddpm(Ddpm::from_container(c)?),
            EstimatorKind::Cnf => AnyEstimator::Cnf(Cnf::from_container(c)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.as_dyn().to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

impl DensityEstimator for AnyEstimator {
    fn kind(&self) -> EstimatorKind {
        self.as_dyn().kind()
    }
    fn input_dim(&self) -> usize {
        self.as_dyn().input_dim()
    }
    fn is_fitted(&self) -> bool {
        self.as_dyn().is_fitted()
    }
    fn fit(&mut self, train: &Array2<f64>, val: &Array2<f64>, seed: u64) -> Result<FitReport> {
        self.as_dyn_mut().fit(train, val, seed)
    }
    fn log_prob_with(&self, x: &Array2<f64>, exec: Exec) -> Result<Array1<f64>> {
        self.as_dyn().log_prob_with(x, exec)
    }
    fn threshold(&self) -> Option<f64> {
        self.as_dyn().threshold()
    }
    fn set_threshold(&mut self, tau: f64) {
        self.as_dyn_mut().set_threshold(tau)
    }
    fn to_container(&self) -> Container {
        self.as_dyn().to_container()
    }
}

/// Shared checkpoint fields: estimator tag, input width, threshold, fitted flag.
pub(crate) fn header(kind: EstimatorKind, input_dim: usize, tau: Option<f64>, fitted: bool) -> Container {
    let mut c = Container::new("density_estimator");
    c.put_str("estimator", kind.name());
    c.put_scalar("input_dim", input_dim as f64);
    c.put_scalar("tau", tau.unwrap_or(f64::NAN));
    c.put_u8("fitted", vec![u8::from(fitted)]);
    c
}

pub(crate) fn read_header(c: &Container, kind: EstimatorKind) -> Result<(usize, Option<f64>, bool)> {
    c.expect_kind("density_estimator")?;
    let found = c.get_str("estimator")?;
    if found != kind.name() {
        return Err(format_err("estimator", format!("expected {kind}, found {found}")));
    }
    let tau = c.get_scalar("tau")?;
    Ok((
        c.get_scalar("input_dim")? as usize,
        (!tau.is_nan()).then_some(tau),
        c.get_u8("fitted")?.first().is_some_and(|&f| f != 0),
    ))
}

pub(crate) fn store_to_container(c: &mut Container, prefix: &str, store: &gormpo_nn::ParamStore) {
    for (name, v) in store.iter() {
        c.put_array2(&format!("{prefix}.{name}"), v);
    }
}

pub(crate) fn store_from_container(c: &Container, prefix: &str, store: &mut gormpo_nn::ParamStore) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut items = Vec::with_capacity(names.len());
    for n in &names {
        items.push((n.as_str(), c.get_array2(&format!("{prefix}.{n}"))?));
    }
    store.load(items).map_err(|e| format_err(prefix, e.to_string()))
}

pub(crate) fn config_to_container<T: Serialize>(c: &mut Container, config: &T) {
    c.put_str("config", &serde_json::to_string(config).expect("configs serialize"));
}

pub(crate) fn config_from_container<T: for<'de> Deserialize<'de>>(c: &Container) -> Result<T> {
    serde_json::from_str(c.get_str("config")?).map_err(|e| format_err("config", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&v, 1.0) - 1.99).abs() < 1e-12);
        assert_eq!(percentile(&[4.0; 10], 1.0), 4.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&[0.0, 10.0], 25.0), 2.5);
    }

    #[test]
    fn estimator_names_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("gmm".parse::<EstimatorKind>().is_err());
    }
}
