//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use kpsr::data::{FeatureMaps, FeatureSpecs};
use kpsr::env::EnvConfig;
use kpsr::operators::DEFAULT_DIMENSION_CAP;
use kpsr::{Error, Result, TrainConfig};

use crate::experiment::{linear_specs, one_hot_specs};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Sample sizes of the convergence grid.
    pub sizes: Vec<usize>,
    /// Replicates per sample size.
    pub replicates: u64,
    /// Link refits in the Bellman-loss trace.
    pub refits: usize,
    pub refit_episodes: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            sizes: vec![2_000, 8_000, 32_000],
            replicates: 5,
            refits: 10,
            refit_episodes: 5_000,
        }
    }
}

fn default_cap() -> usize {
    DEFAULT_DIMENSION_CAP
}

fn default_mc() -> usize {
    1_000
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Environment file, relative to the config file.
    pub env: PathBuf,
    pub window: usize,
    pub history: usize,
    /// Defaults to one-hot features for discrete environments and affine
    /// linear features for continuous ones.
    #[serde(default)]
    pub features: Option<FeatureSpecs>,
    /// Operator ridge; `null` selects the data-dependent default.
    #[serde(default)]
    pub ridge: Option<f64>,
    pub episodes: usize,
    pub horizon: usize,
    #[serde(default)]
    pub held_out_fraction: f64,
    #[serde(default = "default_cap")]
    pub dimension_cap: usize,
    /// Monte Carlo samples per history in `evaluate`.
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    pub seed: u64,
    /// Relative to the config file.
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

/// A parsed config with its paths resolved and its environment loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub env: EnvConfig,
    pub out: PathBuf,
}

impl Experiment {
    /// Reads `path`; `seed` overrides both the data and the training seed and
    /// `out` the output directory.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(s) = seed {
            config.seed = s;
            if let Some(t) = config.train.as_mut() {
                t.seed = s;
            }
        }
        let env_path = base.join(&config.env);
        if !env_path.is_file() {
            return Err(Error::Config(format!("environment file {} does not exist", env_path.display())));
        }
        let env = EnvConfig::load(&env_path).map_err(|e| Error::Config(format!("{}: {e}", env_path.display())))?;
        let out = out.map_or_else(|| base.join(&config.output_dir), Path::to_path_buf);
        let experiment = Self { config, env, out };
        experiment.validate()?;
        Ok(experiment)
    }

    pub fn from_parts(config: ExperimentConfig, env: EnvConfig, out: PathBuf) -> Result<Self> {
        let experiment = Self { config, env, out };
        experiment.validate()?;
        Ok(experiment)
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.horizon <= c.window + c.history {
            return Err(Error::Config(format!(
                "horizon {} leaves no window anchors for W={} L={}",
                c.horizon, c.window, c.history
            )));
        }
        if c.ridge.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("ridge must be positive".into()));
        }
        if let Some(t) = &c.train {
            t.validate()?;
            if t.thresholds.len() != self.env.descriptor().risk_channels {
                return Err(Error::Config(format!(
                    "{} thresholds for {} risk channels",
                    t.thresholds.len(),
                    self.env.descriptor().risk_channels
                )));
            }
        }
        self.maps()?;
        Ok(())
    }

    pub fn specs(&self) -> Result<FeatureSpecs> {
        match &self.config.features {
            Some(f) => Ok(f.clone()),
            None => one_hot_specs(&self.env).or_else(|_| linear_specs(&self.env)),
        }
    }

    pub fn maps(&self) -> Result<FeatureMaps> {
        FeatureMaps::new(self.specs()?, self.config.window, self.config.history)
    }

    pub fn train_config(&self) -> Result<&TrainConfig> {
        self.config
            .train
            .as_ref()
            .ok_or_else(|| Error::Config(format!("config `{}` has no train section", self.config.name)))
    }

    /// Hash of the resolved config and the environment it names.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        h.update(self.env.config_hash().as_bytes());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Comment lines stamped at the top of every text output.
    pub fn stamp(&self) -> Vec<String> {
        vec![
            format!("kpsr {TOOL_VERSION}"),
            format!("config {} {}", self.config.name, self.hash()),
            format!("env {} {}", self.env.name(), self.env.config_hash()),
            format!("seed {}", self.config.seed),
        ]
    }
}
