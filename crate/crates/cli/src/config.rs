//! Run configuration. Every section rejects unknown keys.

use std::path::{Path, PathBuf};

use gormpo_core::density::{CnfConfig, DdpmConfig, EstimatorConfigs, EstimatorKind, KdeConfig, RealNvpConfig, VaeConfig};
use gormpo_core::dynamics::DynamicsConfig;
use gormpo_core::mdp::{PdController, PointMassConfig, ToyWeanConfig, WeaningClinician};
use gormpo_core::policy::{MbpoConfig, LAMBDA_GRID};
use gormpo_core::theory::SuiteConfig;
use gormpo_core::Exec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    #[default]
    Toywean,
    Pointmass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub name: EnvName,
    pub toywean: ToyWeanConfig,
    pub pointmass: PointMassConfig,
    /// Behavior policy for ToyWean data.
    pub clinician: WeaningClinician,
    /// Behavior policy for PointMass data.
    pub controller: PdController,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparseSection {
    pub drop_frac: f64,
    /// Raw action-norm band of the low-support box.
    pub action_range: (f64, f64),
    /// Rewards at or below this percentile fall in the box.
    pub reward_percentile: f64,
}

impl Default for SparseSection {
    fn default() -> Self {
        Self {
            drop_frac: 0.5,
            action_range: (2.0, 3.0),
            reward_percentile: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub episodes: usize,
    /// Clip for z-scored rewards.
    pub reward_clip: Option<f64>,
    /// Train / validation / test trajectory fractions.
    pub split: (f64, f64, f64),
    /// Kept apart from the run seed so every stage sees the same split.
    pub split_seed: u64,
    pub sparse: SparseSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            episodes: 200,
            reward_clip: None,
            split: (0.6, 0.2, 0.2),
            split_seed: 0,
            sparse: SparseSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodSection {
    pub mus: Vec<f64>,
    pub noise_std: f64,
    pub seeds: u64,
    /// Test trajectories per benchmark; 0 uses the whole test split.
    pub trajectories: usize,
}

impl Default for OodSection {
    fn default() -> Self {
        Self {
            mus: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            noise_std: 0.1,
            seeds: 5,
            trajectories: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub kind: EstimatorKind,
    /// Spread discrete action levels uniformly over their bins before fitting.
    pub dequantize: bool,
    pub kde: KdeConfig,
    pub vae: VaeConfig,
    pub realnvp: RealNvpConfig,
    pub ddpm: DdpmConfig,
    pub cnf: CnfConfig,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let c = EstimatorConfigs::default();
        Self {
            kind: EstimatorKind::Kde,
            dequantize: true,
            kde: c.kde,
            vae: c.vae,
            realnvp: c.realnvp,
            ddpm: c.ddpm,
            cnf: c.cnf,
        }
    }
}

impl EstimatorSection {
    pub fn configs(&self) -> EstimatorConfigs {
        EstimatorConfigs {
            kde: self.kde.clone(),
            vae: self.vae.clone(),
            realnvp: self.realnvp.clone(),
            ddpm: self.ddpm.clone(),
            cnf: self.cnf.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuardianSection {
    pub enabled: bool,
    pub lambda: f64,
    pub tau_override: Option<f64>,
    pub linear_ablation: bool,
}

impl Default for GuardianSection {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: 0.1,
            tau_override: None,
            linear_ablation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    /// Dataset start states for the OOD-visitation rollout.
    pub ood_starts: usize,
    pub ood_horizon: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 100,
            ood_starts: 1000,
            ood_horizon: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { lambdas: LAMBDA_GRID.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub parallel: bool,
    pub env: EnvSection,
    pub data: DataSection,
    pub ood: OodSection,
    pub estimator: EstimatorSection,
    pub guardian: GuardianSection,
    pub dynamics: DynamicsConfig,
    pub policy: MbpoConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub theory: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            parallel: true,
            env: EnvSection::default(),
            data: DataSection::default(),
            ood: OodSection::default(),
            estimator: EstimatorSection::default(),
            guardian: GuardianSection::default(),
            dynamics: DynamicsConfig::default(),
            policy: MbpoConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            theory: SuiteConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// SHA-256 of the canonical JSON form, excluding the seed and the output
    /// directory, which the manifest records separately.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("seed");
            map.remove("out");
        }
        Sha256::digest(v.to_string().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in ["lamda = 0.1", "[guardian]\nlamda = 0.1", "[estimator.kde]\nbandwith = 1.0", "[policy.sac]\nhiden = [4]"] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, CliError::Usage(_)), "{text}");
            assert_eq!(err.exit_code(), 2);
        }
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::parse("seed = 3\n[env]\nname = \"pointmass\"\n[guardian]\nlambda = 0.4\n[estimator]\nkind = \"realnvp\"\n[estimator.kde]\nbandwidth = 0.3\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.env.name, EnvName::Pointmass);
        assert_eq!(c.guardian.lambda, 0.4);
        assert_eq!(c.estimator.kind, EstimatorKind::RealNvp);
        assert_eq!(c.estimator.kde.bandwidth, 0.3);
    }

    #[test]
    fn hash_ignores_seed_and_output_but_tracks_parameters() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 9;
        b.out = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.guardian.lambda = 0.2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
