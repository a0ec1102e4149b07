use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrators::MlplattConfig;
use crate::datagen::GeneratorConfig;
use crate::dataio::{AliExpressColumns, ContextSource};
use crate::metrics::DEFAULT_BINS;
use crate::ranker::RankerConfig;
use crate::{Error, Result};

/// Where the listings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Generated per seed; the run seed is added to the generator seed.
    Synthetic(GeneratorConfig),
    /// A file in the dataset text format.
    File { path: PathBuf },
    /// A CSV export of the AliExpress search log.
    Aliexpress {
        path: PathBuf,
        #[serde(default)]
        columns: AliExpressColumns,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(GeneratorConfig::default())
    }
}

/// One entry of the calibrator roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibratorSpec {
    Platt,
    SmoothedIsotonic {
        #[serde(default = "default_isotonic_bins")]
        bins: usize,
    },
    ConfCalib {
        #[serde(default = "default_level")]
        level: f64,
    },
    Mlplatt(MlplattConfig),
}

fn default_isotonic_bins() -> usize {
    100
}

fn default_level() -> f64 {
    0.95
}

impl CalibratorSpec {
    pub fn label(&self) -> &'static str {
        match self {
            CalibratorSpec::Platt => "Platt",
            CalibratorSpec::SmoothedIsotonic { .. } => "Smoothed Isotonic",
            CalibratorSpec::ConfCalib { .. } => "ConfCalib",
            CalibratorSpec::Mlplatt(_) => "MLPlatt",
        }
    }

    pub fn default_roster() -> Vec<CalibratorSpec> {
        vec![
            CalibratorSpec::Platt,
            CalibratorSpec::SmoothedIsotonic {
                bins: default_isotonic_bins(),
            },
            CalibratorSpec::ConfCalib {
                level: default_level(),
            },
            CalibratorSpec::Mlplatt(MlplattConfig::default()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Number of ECE bins.
    pub bins: usize,
    /// Share of listings held out for evaluation.
    pub test_fraction: f64,
    /// Share of the training listings reserved for fitting calibrators. Zero
    /// fits calibrators on the ranker's own training listings.
    pub calibration_holdout: f64,
    pub context_source: ContextSource,
    pub bootstrap_resamples: usize,
    pub significance_level: f64,
    /// Penalty weights for the sweep.
    pub thetas: Vec<f64>,
    /// Cap on held-out listings evaluated per sweep point.
    pub theta_sample: usize,
    pub rcr_alphas: Vec<f64>,
    /// Write fitted models and scored datasets next to the reports.
    pub write_artifacts: bool,
    pub out_dir: PathBuf,
    pub dataset: DatasetSource,
    pub ranker: RankerConfig,
    pub calibrators: Vec<CalibratorSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            bins: DEFAULT_BINS,
            test_fraction: 1.0 / 3.0,
            calibration_holdout: 0.0,
            context_source: ContextSource::Raw,
            bootstrap_resamples: 1000,
            significance_level: 0.01,
            thetas: vec![0.0, 1e-4, 1e-3, 1e-2, 1.0],
            theta_sample: 100_000,
            rcr_alphas: vec![1e-3, 1e-2, 1e-1],
            write_artifacts: true,
            out_dir: PathBuf::from("runs"),
            dataset: DatasetSource::default(),
            ranker: RankerConfig::default(),
            calibrators: CalibratorSpec::default_roster(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.bins == 0 {
            return Err(Error::config("bins must be at least 1"));
        }
        if self.calibrators.is_empty() {
            return Err(Error::config("the calibrator roster is empty"));
        }
        let mut labels: Vec<&str> = self.calibrators.iter().map(CalibratorSpec::label).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("each calibrator kind may appear once in the roster"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction must be in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.calibration_holdout) {
            return Err(Error::config("calibration_holdout must be in [0, 1)"));
        }
        if !(self.significance_level > 0.0 && self.significance_level < 1.0) {
            return Err(Error::config("significance_level must be in (0, 1)"));
        }
        if self.theta_sample == 0 {
            return Err(Error::config("theta_sample must be positive"));
        }
        if self.thetas.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::config("thetas must be finite and non-negative"));
        }
        if self.rcr_alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::config("rcr_alphas must lie in [0, 1]"));
        }
        Ok(())
    }

    /// First MLPlatt entry of the roster, or the default configuration.
    pub fn mlplatt(&self) -> MlplattConfig {
        self.calibrators
            .iter()
            .find_map(|c| match c {
                CalibratorSpec::Mlplatt(m) => Some(m.clone()),
                _ => None,
            })
            .unwrap_or_default()
    }

    /// First 16 hex digits of the SHA-256 of the config, output directory
    /// excluded.
    pub fn hash(&self) -> Result<String> {
        let mut keyed = self.clone();
        keyed.out_dir = PathBuf::new();
        let digest = Sha256::digest(keyed.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    /// The config hash as a number, for seeding config-wide randomness.
    pub fn hash_seed(&self) -> Result<u64> {
        u64::from_str_radix(&self.hash()?, 16).map_err(|e| Error::config(e.to_string()))
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.out_dir.join(format!("run-{}", self.hash()?)))
    }
}
