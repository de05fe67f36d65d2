//! Simulated partially observable systems with exact oracles.

pub mod lgs;
pub mod shipped;
pub mod tabular;

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{StepRecord, Trajectory};
use crate::error::{Error, Result};
use crate::kernel::Datum;
use crate::seed::{derive_seed, purpose, stream_rng};

pub use lgs::LinearGaussian;
pub use tabular::TabularPomdp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpaceKind {
    Discrete { size: usize },
    Continuous { dim: usize, low: f64, high: f64 },
}

impl SpaceKind {
    /// Uniform draw over the space (box-uniform for continuous spaces).
    pub fn sample_uniform(&self, rng: &mut ChaCha8Rng) -> Datum {
        match *self {
            SpaceKind::Discrete { size } => Datum::Symbol(rng.gen_range(0..size as u32)),
            SpaceKind::Continuous { dim, low, high } => {
                Datum::Vector((0..dim).map(|_| low + (high - low) * rng.gen::<f64>()).collect())
            }
        }
    }

    pub fn size(&self) -> Option<usize> {
        match *self {
            SpaceKind::Discrete { size } => Some(size),
            SpaceKind::Continuous { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvDescriptor {
    pub name: String,
    pub action: SpaceKind,
    pub observation: SpaceKind,
    pub risk_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub observation: Datum,
    pub reward: f64,
    pub risks: Vec<f64>,
}

pub trait Env: Send {
    fn descriptor(&self) -> EnvDescriptor;
    /// Redraws the initial latent state; rollouts after `reset(seed)` are reproducible.
    fn reset(&mut self, seed: u64);
    fn step(&mut self, action: &Datum) -> Result<EnvStep>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvConfig {
    Tabular(TabularPomdp),
    LinearGaussian(LinearGaussian),
}

impl EnvConfig {
    pub fn validated(self) -> Result<Self> {
        Ok(match self {
            EnvConfig::Tabular(t) => EnvConfig::Tabular(t.validated()?),
            EnvConfig::LinearGaussian(l) => EnvConfig::LinearGaussian(l.validated()?),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: EnvConfig = serde_json::from_str(&text)?;
        cfg.validated()
    }

    pub fn name(&self) -> &str {
        match self {
            EnvConfig::Tabular(t) => &t.name,
            EnvConfig::LinearGaussian(l) => &l.name,
        }
    }

    pub fn descriptor(&self) -> EnvDescriptor {
        match self {
            EnvConfig::Tabular(t) => t.descriptor(),
            EnvConfig::LinearGaussian(l) => l.descriptor(),
        }
    }

    pub fn instantiate(&self) -> Box<dyn Env> {
        match self {
            EnvConfig::Tabular(t) => Box::new(t.instantiate()),
            EnvConfig::LinearGaussian(l) => Box::new(l.instantiate()),
        }
    }

    pub fn tabular(&self) -> Result<&TabularPomdp> {
        match self {
            EnvConfig::Tabular(t) => Ok(t),
            _ => Err(Error::NoOracle(self.name().to_string())),
        }
    }

    pub fn linear_gaussian(&self) -> Result<&LinearGaussian> {
        match self {
            EnvConfig::LinearGaussian(l) => Ok(l),
            _ => Err(Error::NoOracle(self.name().to_string())),
        }
    }

    /// Short hash of the canonical serialization, stamped into output files.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("env config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Chooses the next actions from the episode so far. Returning several
/// actions executes them open loop.
pub type ActionChooser<'a> = dyn Fn(&[StepRecord], &mut ChaCha8Rng) -> Result<Vec<Datum>> + Sync + 'a;

/// Runs `episodes` episodes of `horizon` steps. Episode `e` draws its latent
/// randomness and its action randomness from streams keyed by `(seed, e)`.
pub fn rollout_with(
    env: &EnvConfig,
    episodes: usize,
    horizon: usize,
    seed: u64,
    first_episode: u64,
    chooser: &ActionChooser<'_>,
) -> Result<Vec<Trajectory>> {
    (0..episodes as u64)
        .into_par_iter()
        .map(|e| {
            let id = first_episode + e;
            let mut instance = env.instantiate();
            instance.reset(derive_seed(seed, &[purpose::ROLLOUT, id]));
            let mut rng = stream_rng(seed, &[purpose::BEHAVIOR, id]);
            let mut steps: Vec<StepRecord> = Vec::with_capacity(horizon);
            while steps.len() < horizon {
                let actions = chooser(&steps, &mut rng)?;
                if actions.is_empty() {
                    return Err(Error::Shape("policy returned no actions".into()));
                }
                for action in actions {
                    if steps.len() == horizon {
                        break;
                    }
                    let out = instance.step(&action)?;
                    steps.push(StepRecord {
                        action,
                        observation: out.observation,
                        reward: out.reward,
                        risks: out.risks,
                    });
                }
            }
            Ok(Trajectory { episode: id, steps })
        })
        .collect()
}

/// Rollouts under the uniform behavior policy.
pub fn rollout(env: &EnvConfig, episodes: usize, horizon: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if horizon == 0 {
        return Err(Error::Config("rollout horizon must be at least 1".into()));
    }
    let space = env.descriptor().action;
    rollout_with(env, episodes, horizon, seed, 0, &|_, rng| Ok(vec![space.sample_uniform(rng)]))
}

/// Rollouts that always play `action`.
pub fn rollout_constant(env: &EnvConfig, episodes: usize, horizon: usize, seed: u64, action: Datum) -> Result<Vec<Trajectory>> {
    rollout_with(env, episodes, horizon, seed, 0, &|_, _| Ok(vec![action.clone()]))
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Pearson statistic `Σ (n_i - N p_i)² / (N p_i)` over cells with `p_i > 0`,
/// and its degrees of freedom.
pub fn chi_square(counts: &[u64], probs: &[f64]) -> (f64, usize) {
    let n: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&c, &p) in counts.iter().zip(probs) {
        if p > 0.0 {
            let e = n as f64 * p;
            stat += (c as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    (stat, cells.saturating_sub(1))
}
