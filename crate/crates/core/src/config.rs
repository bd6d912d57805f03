//! Strict JSON experiment configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::constraints::PenaltyConfig;
use crate::datasets::GridSpec;
use crate::error::{Error, Result};
use crate::experiments::{BenchSpec, Condition, DEFAULT_TAU_SLICES};
use crate::pricing::SabrParams;
use crate::training::TrainConfig;

/// One archivable file describing data, objective, training and outputs.
/// Every key is optional and falls back to the baseline experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// SABR parameters of the synthetic surface; `nu` and `rho` are
    /// overridden per condition by `matrix`.
    pub sabr: SabrParams,
    /// In-sample (training) grid.
    pub grid: GridSpec,
    /// Penalty mesh.
    pub mesh: GridSpec,
    /// Dense out-of-sample evaluation grid.
    pub out_sample: GridSpec,
    pub penalty: PenaltyConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Paired seeds: each seed initializes both the MLP and the DCNN run.
    pub seeds: Vec<u64>,
    /// `(nu, rho)` conditions of the matrix.
    pub conditions: Vec<Condition>,
    /// Expiry slices of the risk profiles.
    pub profile_taus: Vec<f64>,
    pub bench: BenchSpec,
    /// Worker threads for `matrix` and `bench`.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sabr: SabrParams::default(),
            grid: GridSpec::in_sample(),
            mesh: GridSpec::penalty_mesh(),
            out_sample: GridSpec::out_sample(),
            penalty: PenaltyConfig::baseline(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("results"),
            seeds: (1..=10).collect(),
            conditions: Condition::published(),
            profile_taus: DEFAULT_TAU_SLICES.to_vec(),
            bench: BenchSpec::default(),
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.sabr.validate()?;
        self.grid.validate()?;
        self.mesh.validate()?;
        self.out_sample.validate()?;
        self.penalty.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("conditions must not be empty".into()));
        }
        for c in &self.conditions {
            self.sabr.with_smile(c.nu, c.rho).validate()?;
        }
        if self.profile_taus.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config(format!("profile_taus must be positive, got {:?}", self.profile_taus)));
        }
        self.bench.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses and validates a config. Unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.penalty.self_adaptive = true;
        cfg.train.epochs = 123;
        cfg.seeds = vec![3, 5];
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), cfg.to_json().unwrap());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for text in [
            r#"{"sabr_params": {}}"#,
            r#"{"penalty": {"m_k": 0.1, "m_kk": 0.1, "m_tau": 0.1, "mk": 1}}"#,
            r#"{"train": {"epoch": 5}}"#,
            r#"{"grid": {"moneyness": [1.0], "tau": [1.0], "extra": 0}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seeds": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"jobs": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"architecture": [3, 4, 1]}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"conditions": [{"nu": 0.6, "rho": 1.5}]}"#).is_err());
    }
}
