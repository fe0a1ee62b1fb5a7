//! Run configuration read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::csv::{load_csv, CsvSpec};
use super::synth::{generate, SynthConfig};
use super::{hex, split, standardize, Dataset};
use crate::decomposition::{DecompositionConfig, FixedRanks};
use crate::error::{Result, SfpError};
use crate::fairness::FairnessMetric;
use crate::linalg::DEFAULT_RIDGE;
use crate::predictors::ModelKind;
use crate::sdr::SdrMethod;

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SynthConfig),
    Csv(CsvSpec),
    /// Adult census files with the built-in column recipe.
    Adult { paths: Vec<PathBuf> },
    /// Bank marketing file with the built-in column recipe.
    Bank { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SynthConfig::default())
    }
}

impl DatasetSpec {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, DatasetSpec::Synthetic(_))
    }

    fn resolve(&self, base: Option<&Path>) -> DatasetSpec {
        let fix = |p: &PathBuf| match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.clone(),
        };
        match self {
            DatasetSpec::Synthetic(c) => DatasetSpec::Synthetic(c.clone()),
            DatasetSpec::Csv(c) => {
                let mut c = c.clone();
                c.paths = c.paths.iter().map(fix).collect();
                DatasetSpec::Csv(c)
            }
            DatasetSpec::Adult { paths } => DatasetSpec::Adult {
                paths: paths.iter().map(fix).collect(),
            },
            DatasetSpec::Bank { path } => DatasetSpec::Bank { path: fix(path) },
        }
    }

    pub fn csv_spec(&self) -> Option<CsvSpec> {
        match self {
            DatasetSpec::Synthetic(_) => None,
            DatasetSpec::Csv(c) => Some(c.clone()),
            DatasetSpec::Adult { paths } => Some(CsvSpec::adult(paths.clone())),
            DatasetSpec::Bank { path } => Some(CsvSpec::bank(path.clone())),
        }
    }
}

/// What to do when no projection level meets the utility floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Use the largest projection level.
    #[default]
    Full,
    /// Use the level with the best validation utility.
    BestUtility,
}

/// Settings for the `influence` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfluenceSettings {
    pub n_list: Vec<usize>,
    pub replications: usize,
    /// Projection levels to study; `None` means `0` and `s`.
    pub levels: Option<Vec<usize>>,
    pub eps: f64,
}

impl Default for InfluenceSettings {
    fn default() -> Self {
        Self {
            n_list: vec![500, 2000],
            replications: 200,
            levels: None,
            eps: 1e-5,
        }
    }
}

/// Complete configuration of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub sdr_method: SdrMethod,
    pub sensitive_method: SdrMethod,
    /// Slices for continuous targets; `None` means `p + 1`.
    pub slices: Option<usize>,
    pub bootstrap: usize,
    pub kmax: Option<usize>,
    pub ridge: f64,
    pub fixed_ranks: Option<FixedRanks>,
    pub tau: f64,
    /// `None` picks MCDP for classification and dCov for regression.
    pub metric: Option<FairnessMetric>,
    pub fallback: Fallback,
    pub m_step: usize,
    /// `None` picks least squares for continuous targets and softmax otherwise.
    pub model: Option<ModelKind>,
    /// L2 penalty for softmax weights.
    pub l2: f64,
    /// Train/validation/test fractions; `None` means `[0.8, 0.0, 0.2]` for
    /// synthetic data and `[0.7, 0.1, 0.2]` for files.
    pub split: Option<[f64; 3]>,
    pub dcov_cap: usize,
    pub threads: Option<usize>,
    pub influence: InfluenceSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            sdr_method: SdrMethod::Save,
            sensitive_method: SdrMethod::Save,
            slices: None,
            bootstrap: 30,
            kmax: None,
            ridge: DEFAULT_RIDGE,
            fixed_ranks: None,
            tau: 0.95,
            metric: None,
            fallback: Fallback::Full,
            m_step: 1,
            model: None,
            l2: 1e-4,
            split: None,
            dcov_cap: crate::fairness::DCOV_CAP,
            threads: None,
            influence: InfluenceSettings::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON text and validates it.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| SfpError::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        cfg.dataset = cfg.dataset.resolve(path.parent());
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(SfpError::Input(format!("tau {} must be in (0, 1]", self.tau)));
        }
        if self.bootstrap == 0 {
            return Err(SfpError::Input("bootstrap must be at least 1".into()));
        }
        if self.m_step == 0 {
            return Err(SfpError::Input("m_step must be at least 1".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(SfpError::Input("ridge must be finite and >= 0".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(SfpError::Input("l2 must be finite and >= 0".into()));
        }
        if let Some(h) = self.slices {
            if h < 2 {
                return Err(SfpError::Input("slices must be at least 2".into()));
            }
        }
        if self.kmax == Some(0) {
            return Err(SfpError::Input("kmax must be at least 1".into()));
        }
        if self.dcov_cap < 2 {
            return Err(SfpError::Input("dcov_cap must be at least 2".into()));
        }
        if self.threads == Some(0) {
            return Err(SfpError::Input("threads must be at least 1".into()));
        }
        let f = self.split_fractions();
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 || f[0] <= 0.0 {
            return Err(SfpError::Input(format!("split fractions {f:?} must be >= 0 and sum to 1")));
        }
        if self.influence.replications < 2 || self.influence.n_list.is_empty() {
            return Err(SfpError::Input("influence needs n_list and >= 2 replications".into()));
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        Ok(())
    }

    pub fn split_fractions(&self) -> [f64; 3] {
        self.split.unwrap_or(if self.dataset.is_synthetic() {
            [0.8, 0.0, 0.2]
        } else {
            [0.7, 0.1, 0.2]
        })
    }

    pub fn decomposition(&self) -> DecompositionConfig {
        DecompositionConfig {
            sdr_method: self.sdr_method,
            sensitive_method: self.sensitive_method,
            slices: self.slices,
            bootstrap: self.bootstrap,
            kmax: self.kmax,
            ridge: self.ridge,
            seed: self.seed,
            fixed_ranks: self.fixed_ranks,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let text = super::report::to_canonical_json(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    /// Loads or generates the data, splits it and standardizes on the
    /// training rows.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                let mut s = s.clone();
                s.seed = self.seed;
                generate(&s)?
            }
            other => load_csv(&other.csv_spec().expect("file dataset"))?,
        };
        let mut ds = split(ds, self.split_fractions(), self.seed)?;
        standardize(&mut ds)?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json("{\"seed\": 1, \"bogus\": 2}").is_err());
        assert!(RunConfig::from_json("{\"dataset\": {\"synthetic\": {\"n\": 100, \"oops\": 1}}}").is_err());
        let cfg = RunConfig::from_json("{\"seed\": 4, \"metric\": \"dp\", \"tau\": 0.9}").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.metric, Some(FairnessMetric::Dp));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json("{\"tau\": 0.0}").is_err());
        assert!(RunConfig::from_json("{\"tau\": 1.5}").is_err());
        assert!(RunConfig::from_json("{\"m_step\": 0}").is_err());
        assert!(RunConfig::from_json("{\"split\": [0.5, 0.1, 0.1]}").is_err());
    }

    #[test]
    fn round_trip_and_digest() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        let other = RunConfig { seed: 1, ..cfg };
        assert_ne!(other.digest(), back.digest());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, "{\"dataset\": {\"bank\": {\"path\": \"bank.csv\"}}}").unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.dataset, DatasetSpec::Bank { path: dir.path().join("bank.csv") });
    }
}
