//! Trajectories, history/test windowing and regression blocks.
//!
//! Record `k` of a trajectory holds the action taken just before step `k` and
//! the observation emitted at step `k`, i.e. the pair `(a_{k-1}, o_k)`. For an
//! anchor `t` the history is records `t-L..t`, the test window records
//! `t..t+W`, the shifted window `t+1..t+W+1` and the extended window
//! `t..t+W+1`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{make_feature_map, Arity, Composition, Datum, FeatureMap, KernelSpec};
use crate::linalg::{FeatureMatrix, SparseVec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: Datum,
    pub observation: Datum,
    pub reward: f64,
    pub risks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode: u64,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(action, observation)` pairs of records `t-len..t`, left-padded with
    /// sentinels when `t < len`.
    pub fn history(&self, t: usize, len: usize) -> Vec<(Datum, Datum)> {
        (0..len)
            .map(|k| {
                let idx = t as isize - len as isize + k as isize;
                if idx < 0 {
                    (Datum::Sentinel, Datum::Sentinel)
                } else {
                    let s = &self.steps[idx as usize];
                    (s.action.clone(), s.observation.clone())
                }
            })
            .collect()
    }
}

fn format_datum(d: &Datum) -> Result<String> {
    match d {
        Datum::Symbol(s) => Ok(s.to_string()),
        Datum::Vector(v) => {
            let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            Ok(format!("[{}]", parts.join(";")))
        }
        Datum::Sentinel => Err(Error::Unsupported("sentinels are not stored in trajectory files".into())),
    }
}

fn parse_f64(s: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::MalformedLine {
        line,
        reason: format!("{what} `{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::MalformedLine {
            line,
            reason: format!("{what} is not finite"),
        });
    }
    Ok(v)
}

fn parse_datum(s: &str, line: usize) -> Result<Datum> {
    let s = s.trim();
    if let Some(inner) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let v = inner
            .split(';')
            .map(|p| parse_f64(p, line, "vector component"))
            .collect::<Result<Vec<_>>>()?;
        Ok(Datum::Vector(v))
    } else {
        s.parse::<u32>().map(Datum::Symbol).map_err(|_| Error::MalformedLine {
            line,
            reason: format!("`{s}` is neither a symbol nor a [v1;v2] vector"),
        })
    }
}

/// Writes the comma-separated record format. `risk_channels` fixes the header
/// when there are no steps to infer it from.
pub fn write_trajectories<W: Write>(
    mut out: W,
    trajectories: &[Trajectory],
    risk_channels: usize,
    comments: &[String],
) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut header = String::from("episode,t,action,observation,reward");
    for i in 1..=risk_channels {
        header.push_str(&format!(",risk_{i}"));
    }
    writeln!(out, "{header}")?;
    for traj in trajectories {
        for (t, s) in traj.steps.iter().enumerate() {
            if s.risks.len() != risk_channels {
                return Err(Error::RiskArity {
                    line: t,
                    expected: risk_channels,
                    found: s.risks.len(),
                });
            }
            let mut line = format!(
                "{},{},{},{},{:?}",
                traj.episode,
                t,
                format_datum(&s.action)?,
                format_datum(&s.observation)?,
                s.reward
            );
            for r in &s.risks {
                line.push_str(&format!(",{r:?}"));
            }
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_trajectories(
    path: &Path,
    trajectories: &[Trajectory],
    risk_channels: usize,
    comments: &[String],
) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trajectories(file, trajectories, risk_channels, comments)
}

/// Parses the record format. Lines starting with `#` are comments.
pub fn read_trajectories<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut risk_channels: Option<usize> = None;
    let mut episodes: BTreeMap<u64, Vec<(usize, usize, StepRecord)>> = BTreeMap::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        let Some(expected) = risk_channels else {
            if fields.len() < 5 || fields[0].trim() != "episode" {
                return Err(Error::MalformedLine {
                    line: line_no,
                    reason: "missing header row".into(),
                });
            }
            risk_channels = Some(fields.len() - 5);
            continue;
        };
        if fields.len() < 5 {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: format!("expected at least 5 fields, found {}", fields.len()),
            });
        }
        if fields.len() - 5 != expected {
            return Err(Error::RiskArity {
                line: line_no,
                expected,
                found: fields.len() - 5,
            });
        }
        let episode: u64 = fields[0].trim().parse().map_err(|_| Error::MalformedLine {
            line: line_no,
            reason: format!("bad episode id `{}`", fields[0]),
        })?;
        let t: usize = fields[1].trim().parse().map_err(|_| Error::MalformedLine {
            line: line_no,
            reason: format!("bad time index `{}`", fields[1]),
        })?;
        let record = StepRecord {
            action: parse_datum(fields[2], line_no)?,
            observation: parse_datum(fields[3], line_no)?,
            reward: parse_f64(fields[4], line_no, "reward")?,
            risks: fields[5..]
                .iter()
                .map(|f| parse_f64(f, line_no, "risk"))
                .collect::<Result<_>>()?,
        };
        episodes.entry(episode).or_default().push((t, line_no, record));
    }
    episodes
        .into_iter()
        .map(|(episode, mut steps)| {
            steps.sort_by_key(|s| s.0);
            for pair in steps.windows(2) {
                if pair[0].0 == pair[1].0 {
                    return Err(Error::MalformedLine {
                        line: pair[1].1,
                        reason: format!("duplicate time index {} in episode {episode}", pair[1].0),
                    });
                }
            }
            Ok(Trajectory {
                episode,
                steps: steps.into_iter().map(|s| s.2).collect(),
            })
        })
        .collect()
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    read_trajectories(std::io::BufReader::new(file))
}

/// One anchored sample of history, test, shifted and extended windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub episode: u64,
    pub anchor: usize,
    /// `(action, observation)` of records `t-L..t`.
    pub history: Vec<(Datum, Datum)>,
    /// `(a_{t-1}, o_t)`, record `t`.
    pub one_step: (Datum, Datum),
    pub test_actions: Vec<Datum>,
    pub test_observations: Vec<Datum>,
    pub shifted_actions: Vec<Datum>,
    pub shifted_observations: Vec<Datum>,
    /// Sum of rewards over records `t..=t+W`.
    pub extended_return: f64,
    pub extended_risks: Vec<f64>,
}

impl WindowSample {
    /// History one step later: drops the oldest pair and appends record `t`.
    pub fn next_history(&self) -> Vec<(Datum, Datum)> {
        let mut h: Vec<(Datum, Datum)> = self.history[1..].to_vec();
        h.push(self.one_step.clone());
        h
    }

    /// Extended observation block `o_{t:t+W}`.
    pub fn extended_observations(&self) -> Vec<Datum> {
        let mut v = vec![self.one_step.1.clone()];
        v.extend(self.shifted_observations.iter().cloned());
        v
    }
}

fn window_at(traj: &Trajectory, t: usize, window: usize, history: usize) -> WindowSample {
    let steps = &traj.steps;
    let slice = |from: usize, to: usize, f: fn(&StepRecord) -> &Datum| -> Vec<Datum> {
        steps[from..to].iter().map(|s| f(s).clone()).collect()
    };
    let n_risks = steps[t].risks.len();
    let mut risks = vec![0.0; n_risks];
    let mut ret = 0.0;
    for s in &steps[t..=t + window] {
        ret += s.reward;
        for (acc, r) in risks.iter_mut().zip(&s.risks) {
            *acc += r;
        }
    }
    WindowSample {
        episode: traj.episode,
        anchor: t,
        history: traj.history(t, history),
        one_step: (steps[t].action.clone(), steps[t].observation.clone()),
        test_actions: slice(t, t + window, |s| &s.action),
        test_observations: slice(t, t + window, |s| &s.observation),
        shifted_actions: slice(t + 1, t + window + 1, |s| &s.action),
        shifted_observations: slice(t + 1, t + window + 1, |s| &s.observation),
        extended_return: ret,
        extended_risks: risks,
    }
}

/// Every anchor `t ∈ [L, T-W-1]` of every episode; `T - W - L` samples per
/// episode when positive.
pub fn make_windows(trajectories: &[Trajectory], window: usize, history: usize) -> Result<Vec<WindowSample>> {
    if window == 0 || history == 0 {
        return Err(Error::InvalidWindow { window, history });
    }
    let per_episode: Vec<Vec<WindowSample>> = trajectories
        .par_iter()
        .map(|traj| {
            let n = traj.len();
            if n < window + history + 1 {
                return Vec::new();
            }
            (history..n - window).map(|t| window_at(traj, t, window, history)).collect()
        })
        .collect();
    Ok(per_episode.into_iter().flatten().collect())
}

/// Window sample anchored at a single index, when it fits.
pub fn window_at_anchor(traj: &Trajectory, t: usize, window: usize, history: usize) -> Option<WindowSample> {
    if t < history || t + window >= traj.len() {
        return None;
    }
    Some(window_at(traj, t, window, history))
}

/// Kernel specs for the raw action and observation spaces plus the history
/// pair space; block and history maps are derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpecs {
    pub action: KernelSpec,
    pub observation: KernelSpec,
    pub history: KernelSpec,
    #[serde(default)]
    pub block_composition: Composition,
    #[serde(default)]
    pub history_composition: Composition,
}

impl FeatureSpecs {
    /// One-hot features everywhere; history symbols pair an action with an
    /// observation.
    pub fn one_hot(actions: usize, observations: usize) -> Self {
        FeatureSpecs {
            action: KernelSpec::OneHot { alphabet: actions },
            observation: KernelSpec::OneHot { alphabet: observations },
            history: KernelSpec::OneHot {
                alphabet: actions * observations,
            },
            block_composition: Composition::Tensor,
            history_composition: Composition::Tensor,
        }
    }
}

/// The five feature maps an operator bundle is built on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMaps {
    pub window: usize,
    pub history_len: usize,
    pub specs: FeatureSpecs,
    pub history: FeatureMap,
    pub action_block: FeatureMap,
    pub observation_block: FeatureMap,
    pub action: FeatureMap,
    pub observation: FeatureMap,
}

impl FeatureMaps {
    pub fn new(specs: FeatureSpecs, window: usize, history_len: usize) -> Result<Self> {
        if window == 0 || history_len == 0 {
            return Err(Error::InvalidWindow {
                window,
                history: history_len,
            });
        }
        if let KernelSpec::OneHot { alphabet } = specs.history {
            match (&specs.action, &specs.observation) {
                (KernelSpec::OneHot { alphabet: na }, KernelSpec::OneHot { alphabet: no }) if na * no == alphabet => {}
                _ => {
                    return Err(Error::InvalidKernel(
                        "one-hot histories need one-hot actions and observations with alphabet |A|·|O|".into(),
                    ))
                }
            }
        }
        Ok(FeatureMaps {
            window,
            history_len,
            history: make_feature_map("history", specs.history.clone(), Arity::Suffix(history_len), specs.history_composition)?,
            action_block: make_feature_map("action-block", specs.action.clone(), Arity::Block(window), specs.block_composition)?,
            observation_block: make_feature_map(
                "observation-block",
                specs.observation.clone(),
                Arity::Block(window),
                specs.block_composition,
            )?,
            action: make_feature_map("action", specs.action.clone(), Arity::Single, Composition::Tensor)?,
            observation: make_feature_map("observation", specs.observation.clone(), Arity::Single, Composition::Tensor)?,
            specs,
        })
    }

    /// Combines an action and the following observation into one history element.
    pub fn pair(&self, action: &Datum, observation: &Datum) -> Result<Datum> {
        match (action, observation) {
            (Datum::Sentinel, Datum::Sentinel) => Ok(Datum::Sentinel),
            (Datum::Symbol(a), Datum::Symbol(o)) => {
                let no = self.observation.alphabet().ok_or_else(|| {
                    Error::InvalidKernel("symbolic observations need a one-hot observation map".into())
                })?;
                Ok(Datum::Symbol(a * no as u32 + o))
            }
            (Datum::Vector(a), Datum::Vector(o)) => {
                let mut v = a.clone();
                v.extend_from_slice(o);
                Ok(Datum::Vector(v))
            }
            _ => Err(Error::Shape(format!("cannot pair action {action:?} with observation {observation:?}"))),
        }
    }

    pub fn history_sparse(&self, pairs: &[(Datum, Datum)]) -> Result<SparseVec> {
        let elems: Vec<Datum> = pairs.iter().map(|(a, o)| self.pair(a, o)).collect::<Result<_>>()?;
        let refs: Vec<&Datum> = elems.iter().collect();
        self.history.embed_sparse(&refs)
    }

    pub fn history_dense(&self, pairs: &[(Datum, Datum)]) -> Result<Vec<f64>> {
        Ok(self.history_sparse(pairs)?.to_dense(self.history.output_dim()))
    }

    pub fn block_sparse(map: &FeatureMap, block: &[Datum]) -> Result<SparseVec> {
        let refs: Vec<&Datum> = block.iter().collect();
        map.embed_sparse(&refs)
    }

    pub fn single_sparse(map: &FeatureMap, x: &Datum) -> Result<SparseVec> {
        map.embed_sparse(&[x])
    }
}

/// Column-aligned feature matrices, one column per window sample.
#[derive(Debug, Clone)]
pub struct RegressionBlocks {
    pub history: FeatureMatrix,
    pub next_history: FeatureMatrix,
    pub action_block: FeatureMatrix,
    pub observation_block: FeatureMatrix,
    pub action: FeatureMatrix,
    pub observation: FeatureMatrix,
    pub shifted_action_block: FeatureMatrix,
    pub shifted_observation_block: FeatureMatrix,
    pub returns: Vec<f64>,
    /// One vector per risk channel.
    pub risks: Vec<Vec<f64>>,
}

impl RegressionBlocks {
    pub fn len(&self) -> usize {
        self.history.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn featurize_windows(samples: &[WindowSample], maps: &FeatureMaps) -> Result<RegressionBlocks> {
    if let Some(s) = samples.first() {
        if s.history.len() != maps.history_len || s.test_actions.len() != maps.window {
            return Err(Error::Shape(format!(
                "samples have L={}, W={} but maps expect L={}, W={}",
                s.history.len(),
                s.test_actions.len(),
                maps.history_len,
                maps.window
            )));
        }
    }
    let cols: Vec<[SparseVec; 8]> = samples
        .par_iter()
        .map(|s| -> Result<[SparseVec; 8]> {
            Ok([
                maps.history_sparse(&s.history)?,
                maps.history_sparse(&s.next_history())?,
                FeatureMaps::block_sparse(&maps.action_block, &s.test_actions)?,
                FeatureMaps::block_sparse(&maps.observation_block, &s.test_observations)?,
                FeatureMaps::single_sparse(&maps.action, &s.one_step.0)?,
                FeatureMaps::single_sparse(&maps.observation, &s.one_step.1)?,
                FeatureMaps::block_sparse(&maps.action_block, &s.shifted_actions)?,
                FeatureMaps::block_sparse(&maps.observation_block, &s.shifted_observations)?,
            ])
        })
        .collect::<Result<_>>()?;
    let new = |m: &FeatureMap| FeatureMatrix::new(m.output_dim(), m.space().clone());
    let mut out = RegressionBlocks {
        history: new(&maps.history),
        next_history: new(&maps.history),
        action_block: new(&maps.action_block),
        observation_block: new(&maps.observation_block),
        action: new(&maps.action),
        observation: new(&maps.observation),
        shifted_action_block: new(&maps.action_block),
        shifted_observation_block: new(&maps.observation_block),
        returns: samples.iter().map(|s| s.extended_return).collect(),
        risks: Vec::new(),
    };
    let n_risks = samples.first().map_or(0, |s| s.extended_risks.len());
    out.risks = (0..n_risks)
        .map(|i| samples.iter().map(|s| s.extended_risks[i]).collect())
        .collect();
    for c in &cols {
        out.history.push(&c[0]);
        out.next_history.push(&c[1]);
        out.action_block.push(&c[2]);
        out.observation_block.push(&c[3]);
        out.action.push(&c[4]);
        out.observation.push(&c[5]);
        out.shifted_action_block.push(&c[6]);
        out.shifted_observation_block.push(&c[7]);
    }
    Ok(out)
}

/// Episode-level train/held-out partition.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<WindowSample>,
    pub held_out: Vec<WindowSample>,
    pub seed: u64,
}

/// Assigns whole episodes to the held-out side so that overlapping windows
/// never straddle the split.
pub fn split_by_episode(samples: Vec<WindowSample>, held_out_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&held_out_fraction) {
        return Err(Error::Config(format!("held-out fraction {held_out_fraction} outside [0, 1]")));
    }
    let mut ids: Vec<u64> = samples.iter().map(|s| s.episode).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_held = (ids.len() as f64 * held_out_fraction).round() as usize;
    let held: std::collections::HashSet<u64> = ids[..n_held].iter().copied().collect();
    let (held_out, train) = samples.into_iter().partition(|s| held.contains(&s.episode));
    Ok(DatasetSplit { train, held_out, seed })
}
