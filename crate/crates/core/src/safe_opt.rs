//! Block policies, the hinged Lagrangian, primal line-search ascent, dual
//! projected ascent and the training loop.
//!
//! A policy acts once per start history and emits the open-loop block
//! `a_{t-1}, …, a_{t+W-1}` of `W+1` actions. Its input is
//! `x(h) = [1, 𝒫_{ō,ā} F_h φ̄^𝒜]`, the predicted shifted-observation embedding
//! under mean action features, optionally followed by `φ^H(h)`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{window_at_anchor, FeatureMaps, WindowSample};
use crate::env::{rollout_with, sample_categorical, EnvConfig, SpaceKind};
use crate::error::{Error, Result};
use crate::kernel::{Datum, FeatureVector};
use crate::link::{fit_links, HistoryModel, LinkWeights};
use crate::linalg::SparseVec;
use crate::operators::OperatorBundle;
use crate::seed::{derive_seed, purpose, stream_rng};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BlockSpace {
    Discrete { alphabet: usize, len: usize },
    Continuous { dim: usize, len: usize, low: f64, high: f64 },
}

impl BlockSpace {
    pub fn new(action: &SpaceKind, len: usize) -> Self {
        match *action {
            SpaceKind::Discrete { size } => BlockSpace::Discrete { alphabet: size, len },
            SpaceKind::Continuous { dim, low, high } => BlockSpace::Continuous { dim, len, low, high },
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            BlockSpace::Discrete { len, .. } | BlockSpace::Continuous { len, .. } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of `θ`: one logit per block, or one mean per action coordinate.
    pub fn outputs(&self) -> usize {
        match *self {
            BlockSpace::Discrete { alphabet, len } => alphabet.pow(len as u32),
            BlockSpace::Continuous { dim, len, .. } => dim * len,
        }
    }

    /// Mixed-radix decoding, first action most significant.
    pub fn decode(&self, mut code: usize) -> Vec<Datum> {
        let (alphabet, len) = match *self {
            BlockSpace::Discrete { alphabet, len } => (alphabet, len),
            BlockSpace::Continuous { .. } => panic!("continuous blocks have no code"),
        };
        let mut out = vec![Datum::Symbol(0); len];
        for slot in (0..len).rev() {
            out[slot] = Datum::Symbol((code % alphabet) as u32);
            code /= alphabet;
        }
        out
    }

    pub fn enumerate(&self) -> Option<Vec<Vec<Datum>>> {
        match self {
            BlockSpace::Discrete { .. } => Some((0..self.outputs()).map(|c| self.decode(c)).collect()),
            BlockSpace::Continuous { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: DMatrix<f64>,
    /// Gaussian noise scale for continuous blocks.
    pub sigma: f64,
    pub space: BlockSpace,
    pub history_features: bool,
}

fn mean_feature(map: &crate::kernel::FeatureMap, action: &SpaceKind) -> Result<Vec<f64>> {
    let d = map.output_dim();
    if let Some(inputs) = map.enumerate_inputs() {
        let mut acc = vec![0.0; d];
        for x in &inputs {
            let v = FeatureMaps::block_sparse(map, x)?;
            for (&i, &val) in v.indices.iter().zip(&v.values) {
                acc[i as usize] += val;
            }
        }
        let n = inputs.len() as f64;
        return Ok(acc.into_iter().map(|v| v / n).collect());
    }
    match *action {
        SpaceKind::Continuous { dim, low, high } => {
            let mid = Datum::Vector(vec![0.5 * (low + high); dim]);
            let block = vec![mid; map.arity().len()];
            Ok(FeatureMaps::block_sparse(map, &block)?.to_dense(d))
        }
        SpaceKind::Discrete { .. } => Err(Error::Unsupported("mean feature of a non-enumerable discrete map".into())),
    }
}

fn action_kind(space: &BlockSpace) -> SpaceKind {
    match *space {
        BlockSpace::Discrete { alphabet, .. } => SpaceKind::Discrete { size: alphabet },
        BlockSpace::Continuous { dim, low, high, .. } => SpaceKind::Continuous { dim, low, high },
    }
}

/// Predicted embedding of `o_{t+1:t+W}` under mean action features.
pub fn shifted_prediction(bundle: &OperatorBundle, model: &HistoryModel, action: &SpaceKind) -> Result<Vec<f64>> {
    let maps = &bundle.maps;
    let a = mean_feature(&maps.action, action)?;
    let block = mean_feature(&maps.action_block, action)?;
    let p = model.one_step(&a);
    let pair: Vec<f64> = p.iter().flat_map(|po| a.iter().map(move |aa| po * aa)).collect();
    let lifted = bundle.shifted.lift_sparse(&SparseVec::from_dense(&pair));
    Ok((lifted * model.forward(&block)).iter().copied().collect())
}

pub fn policy_feature_dim(bundle: &OperatorBundle, history_features: bool) -> usize {
    1 + bundle.maps.observation_block.output_dim() + if history_features { bundle.maps.history.output_dim() } else { 0 }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

impl PolicyParams {
    pub fn zeros(bundle: &OperatorBundle, space: BlockSpace, sigma: f64, history_features: bool) -> Result<Self> {
        if space.len() != bundle.maps.window + 1 {
            return Err(Error::Shape(format!("policy blocks of length {} for window {}", space.len(), bundle.maps.window)));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("policy noise scale must be positive, got {sigma}")));
        }
        Ok(PolicyParams {
            theta: DMatrix::zeros(space.outputs(), policy_feature_dim(bundle, history_features)),
            sigma,
            space,
            history_features,
        })
    }

    pub fn features(&self, bundle: &OperatorBundle, history: &SparseVec) -> Result<Vec<f64>> {
        let model = HistoryModel::new(bundle, history.clone());
        let mut x = vec![1.0];
        x.extend(shifted_prediction(bundle, &model, &action_kind(&self.space))?);
        if self.history_features {
            x.extend(history.to_dense(bundle.maps.history.output_dim()));
        }
        if x.len() != self.theta.ncols() {
            return Err(Error::Shape(format!("policy features of length {} for {} columns", x.len(), self.theta.ncols())));
        }
        Ok(x)
    }

    fn linear(&self, x: &[f64]) -> Vec<f64> {
        (&self.theta * DVector::from_column_slice(x)).iter().copied().collect()
    }

    /// Block probabilities of a discrete policy.
    pub fn block_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.space {
            BlockSpace::Discrete { .. } => Ok(softmax(&self.linear(x))),
            BlockSpace::Continuous { .. } => Err(Error::Unsupported("continuous policies have densities, not block probabilities".into())),
        }
    }

    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        self.linear(x)
    }

    /// Block index for discrete draws, raw coordinates for continuous ones.
    fn draw(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Result<Draw> {
        match self.space {
            BlockSpace::Discrete { .. } => {
                let p = self.block_probs(x)?;
                Ok(Draw::Code(sample_categorical(&p, rng.gen::<f64>())))
            }
            BlockSpace::Continuous { .. } => {
                let mu = self.mean(x);
                Ok(Draw::Point(
                    mu.iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(rng);
                            m + self.sigma * z
                        })
                        .collect(),
                ))
            }
        }
    }

    fn to_block(&self, d: &Draw) -> Vec<Datum> {
        match (d, &self.space) {
            (Draw::Code(c), _) => self.space.decode(*c),
            (Draw::Point(p), BlockSpace::Continuous { dim, .. }) => p.chunks(*dim).map(|c| Datum::Vector(c.to_vec())).collect(),
            _ => unreachable!("draw kind follows the block space"),
        }
    }

    pub fn sample_with_features(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<Datum>> {
        let d = self.draw(x, rng)?;
        Ok(self.to_block(&d))
    }

    /// `∇_θ log π(block | x)`.
    fn score(&self, x: &[f64], d: &Draw) -> Result<DMatrix<f64>> {
        let xv = DVector::from_column_slice(x);
        let coeff = match d {
            Draw::Code(c) => {
                let mut e: Vec<f64> = self.block_probs(x)?.into_iter().map(|p| -p).collect();
                e[*c] += 1.0;
                DVector::from_vec(e)
            }
            Draw::Point(p) => {
                let mu = self.mean(x);
                DVector::from_iterator(p.len(), p.iter().zip(&mu).map(|(b, m)| (b - m) / self.sigma.powi(2)))
            }
        };
        Ok(coeff * xv.transpose())
    }
}

enum Draw {
    Code(usize),
    Point(Vec<f64>),
}

/// Draws one action block for `history`; deterministic given `seed`.
pub fn policy_sample(policy: &PolicyParams, bundle: &OperatorBundle, history: &FeatureVector, seed: u64) -> Result<Vec<Datum>> {
    bundle.maps.history.space().ensure(&history.space)?;
    let x = policy.features(bundle, &history.sparse())?;
    let mut rng = stream_rng(seed, &[purpose::POLICY]);
    policy.sample_with_features(&x, &mut rng)
}

/// `J = V − Σ_i η_i (C_i − C̄_i)⁺`.
pub fn lagrangian(value: f64, risks: &[f64], thresholds: &[f64], eta: &[f64]) -> Result<f64> {
    if risks.len() != thresholds.len() || risks.len() != eta.len() {
        return Err(Error::Shape(format!(
            "{} risks, {} thresholds and {} multipliers",
            risks.len(),
            thresholds.len(),
            eta.len()
        )));
    }
    Ok(value - penalty(risks, thresholds, eta))
}

fn hinge(c: f64, cbar: f64) -> f64 {
    if c > cbar {
        c - cbar
    } else {
        0.0
    }
}

fn penalty(risks: &[f64], thresholds: &[f64], eta: &[f64]) -> f64 {
    risks
        .iter()
        .zip(thresholds)
        .zip(eta)
        .map(|((&c, &cbar), &e)| if e == 0.0 { 0.0 } else { e * hinge(c, cbar) })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVars {
    pub eta: Vec<f64>,
    pub beta0: f64,
}

impl DualVars {
    pub fn new(channels: usize, beta0: f64) -> Self {
        DualVars {
            eta: vec![0.0; channels],
            beta0,
        }
    }

    /// `β_k = β₀ / √k`.
    pub fn beta(&self, k: usize) -> f64 {
        self.beta0 / (k.max(1) as f64).sqrt()
    }
}

/// `η ← [η + β (C − C̄)]⁺`, componentwise.
pub fn dual_step(duals: &DualVars, risks: &[f64], thresholds: &[f64], beta: f64) -> DualVars {
    let eta = duals
        .eta
        .iter()
        .zip(risks)
        .zip(thresholds)
        .map(|((&e, &c), &cbar)| (e + beta * (c - cbar)).max(0.0))
        .collect();
    DualVars { eta, beta0: duals.beta0 }
}

/// Distinct start histories with their empirical weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBatch {
    pub histories: Vec<Vec<(Datum, Datum)>>,
    pub features: Vec<SparseVec>,
    pub weights: Vec<f64>,
}

impl HistoryBatch {
    pub fn from_windows(samples: &[WindowSample], maps: &FeatureMaps) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("history batch needs at least one window"));
        }
        let mut groups: BTreeMap<Vec<(u32, u64)>, (usize, SparseVec, usize)> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            let f = maps.history_sparse(&s.history)?;
            let key: Vec<(u32, u64)> = f.indices.iter().zip(&f.values).map(|(&i, v)| (i, v.to_bits())).collect();
            groups.entry(key).or_insert((i, f, 0)).2 += 1;
        }
        let n = samples.len() as f64;
        let mut out = HistoryBatch {
            histories: vec![],
            features: vec![],
            weights: vec![],
        };
        for (_, (first, f, count)) in groups {
            out.histories.push(samples[first].history.clone());
            out.features.push(f);
            out.weights.push(count as f64 / n);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }
}

/// Everything the model says about every (history, block) pair.
#[derive(Debug, Clone)]
pub struct ModelTables {
    pub blocks: Vec<Vec<Datum>>,
    /// Policy input per history.
    pub inputs: Vec<Vec<f64>>,
    /// Expected link feature per history and block.
    pub psi: Vec<Vec<SparseVec>>,
}

impl ModelTables {
    pub fn new(bundle: &OperatorBundle, batch: &HistoryBatch, policy: &PolicyParams) -> Result<Self> {
        let blocks = policy
            .space
            .enumerate()
            .ok_or_else(|| Error::Unsupported("training needs an enumerable discrete action space".into()))?;
        let rows: Vec<(Vec<f64>, Vec<SparseVec>)> = batch
            .features
            .par_iter()
            .map(|h| {
                let model = HistoryModel::new(bundle, h.clone());
                let psi = blocks
                    .iter()
                    .map(|b| model.expected_link_feature(bundle, b))
                    .collect::<Result<Vec<_>>>()?;
                Ok((policy.features(bundle, h)?, psi))
            })
            .collect::<Result<_>>()?;
        let (inputs, psi) = rows.into_iter().unzip();
        Ok(ModelTables { blocks, inputs, psi })
    }

    /// `V̂[h][b]` and `Ĉ[h][i][b]` under `links`.
    pub fn values(&self, links: &LinkWeights) -> ValueTables {
        let mut v = Vec::with_capacity(self.psi.len());
        let mut c = Vec::with_capacity(self.psi.len());
        for row in &self.psi {
            let mut vr = Vec::with_capacity(row.len());
            let mut cr = vec![Vec::with_capacity(row.len()); links.risk_channels()];
            for psi in row {
                let (val, risks) = links.apply_sparse(psi);
                vr.push(val);
                for (i, r) in risks.into_iter().enumerate() {
                    cr[i].push(r);
                }
            }
            v.push(vr);
            c.push(cr);
        }
        ValueTables { v, c }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    pub v: Vec<Vec<f64>>,
    pub c: Vec<Vec<Vec<f64>>>,
}

impl ValueTables {
    /// Histories where some constraint is violated by every block.
    pub fn infeasible(&self, thresholds: &[f64]) -> Vec<bool> {
        self.c
            .iter()
            .map(|ch| {
                ch.iter()
                    .zip(thresholds)
                    .any(|(row, &cbar)| row.iter().all(|&c| c > cbar))
            })
            .collect()
    }
}

/// Model evaluation of a policy over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub j: f64,
    pub value: f64,
    pub risks: Vec<f64>,
    pub history_values: Vec<f64>,
    pub history_risks: Vec<Vec<f64>>,
    /// `C̄_i + mean_h (C_i(h) − C̄_i)⁺`.
    pub signal: Vec<f64>,
    /// `max_h C_i(h) − C̄_i`.
    pub worst_slack: Vec<f64>,
}

pub struct Objective<'a> {
    pub tables: &'a ModelTables,
    pub values: &'a ValueTables,
    pub weights: &'a [f64],
    pub excluded: &'a [bool],
    pub thresholds: &'a [f64],
}

impl Objective<'_> {
    fn total_weight(&self) -> f64 {
        self.weights.iter().zip(self.excluded).filter(|(_, &x)| !x).map(|(w, _)| w).sum()
    }

    pub fn evaluate(&self, policy: &PolicyParams, eta: &[f64]) -> Result<Evaluation> {
        let n = self.tables.inputs.len();
        let channels = self.thresholds.len();
        let mut hv = vec![0.0; n];
        let mut hc = vec![vec![0.0; channels]; n];
        for h in 0..n {
            let p = policy.block_probs(&self.tables.inputs[h])?;
            hv[h] = p.iter().zip(&self.values.v[h]).map(|(a, b)| a * b).sum();
            for i in 0..channels {
                hc[h][i] = p.iter().zip(&self.values.c[h][i]).map(|(a, b)| a * b).sum();
            }
        }
        let total = self.total_weight();
        let mut j = 0.0;
        let mut value = 0.0;
        let mut risks = vec![0.0; channels];
        let mut mean_hinge = vec![0.0; channels];
        let mut worst = vec![f64::NEG_INFINITY; channels];
        for h in 0..n {
            if self.excluded[h] {
                continue;
            }
            let w = self.weights[h] / total;
            j += w * (hv[h] - penalty(&hc[h], self.thresholds, eta));
            value += w * hv[h];
            for i in 0..channels {
                risks[i] += w * hc[h][i];
                mean_hinge[i] += w * hinge(hc[h][i], self.thresholds[i]);
                worst[i] = worst[i].max(hc[h][i] - self.thresholds[i]);
            }
        }
        if !j.is_finite() {
            return Err(Error::NonFinite(format!("objective {j}")));
        }
        let signal = self.thresholds.iter().zip(&mean_hinge).map(|(c, m)| c + m).collect();
        Ok(Evaluation {
            j,
            value,
            risks,
            history_values: hv,
            history_risks: hc,
            signal,
            worst_slack: worst,
        })
    }

    /// Score-function estimate of `∇_θ J` from `mc_samples` draws per history
    /// with a leave-one-out mean baseline.
    pub fn gradient(&self, policy: &PolicyParams, eta: &[f64], mc_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
        if mc_samples == 0 {
            return Err(Error::Config("mc-samples must be at least 1".into()));
        }
        let current = self.evaluate(policy, eta)?;
        let total = self.total_weight();
        let parts: Vec<DMatrix<f64>> = (0..self.tables.inputs.len())
            .into_par_iter()
            .map(|h| {
                let mut g = DMatrix::zeros(policy.theta.nrows(), policy.theta.ncols());
                if self.excluded[h] {
                    return Ok(g);
                }
                let x = &self.tables.inputs[h];
                let active: Vec<f64> = (0..self.thresholds.len())
                    .map(|i| if current.history_risks[h][i] > self.thresholds[i] { eta[i] } else { 0.0 })
                    .collect();
                let mut rng = stream_rng(seed, &[purpose::POLICY, h as u64]);
                let mut draws = Vec::with_capacity(mc_samples);
                let mut rewards = Vec::with_capacity(mc_samples);
                for _ in 0..mc_samples {
                    let d = policy.draw(x, &mut rng)?;
                    let b = match d {
                        Draw::Code(c) => c,
                        Draw::Point(_) => return Err(Error::Unsupported("training needs discrete blocks".into())),
                    };
                    let r = self.values.v[h][b]
                        - active
                            .iter()
                            .enumerate()
                            .map(|(i, a)| a * self.values.c[h][i][b])
                            .sum::<f64>();
                    draws.push(d);
                    rewards.push(r);
                }
                let n = mc_samples as f64;
                let mean = rewards.iter().sum::<f64>() / n;
                let scale = if mc_samples > 1 { 1.0 / (n - 1.0) } else { 1.0 };
                for (d, r) in draws.iter().zip(&rewards) {
                    let adv = if mc_samples > 1 { r - mean } else { *r };
                    if adv != 0.0 {
                        g += policy.score(x, d)? * (adv * scale);
                    }
                }
                Ok(g * (self.weights[h] / total))
            })
            .collect::<Result<_>>()?;
        let mut grad = DMatrix::zeros(policy.theta.nrows(), policy.theta.ncols());
        for p in &parts {
            grad += p;
        }
        if let Some((idx, v)) = grad.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (r, c) = (idx % grad.nrows(), idx / grad.nrows());
            return Err(Error::NonFinite(format!("gradient component ({r}, {c}) = {v}")));
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub policy: PolicyParams,
    pub alpha: f64,
    pub accepted: bool,
    pub j_before: f64,
    pub j_after: f64,
}

/// Gradient step with backtracking: halve `alpha` until the batch objective
/// does not decrease, at most 8 times; otherwise keep `θ`.
pub fn policy_step(
    policy: &PolicyParams,
    objective: &Objective<'_>,
    eta: &[f64],
    alpha: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<StepOutcome> {
    let j_before = objective.evaluate(policy, eta)?.j;
    let grad = objective.gradient(policy, eta, mc_samples, seed)?;
    let mut step = alpha;
    for _ in 0..=8 {
        let mut candidate = policy.clone();
        candidate.theta += &grad * step;
        let j_after = objective.evaluate(&candidate, eta)?.j;
        if j_after >= j_before {
            return Ok(StepOutcome {
                policy: candidate,
                alpha: step,
                accepted: true,
                j_before,
                j_after,
            });
        }
        step *= 0.5;
    }
    Ok(StepOutcome {
        policy: policy.clone(),
        alpha: step * 2.0,
        accepted: false,
        j_before,
        j_after: j_before,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub mc_samples: usize,
    pub alpha0: f64,
    /// `α_k = α₀/√k` when set, else constant.
    #[serde(default)]
    pub alpha_decay: bool,
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    /// `null` leaves a channel unconstrained.
    pub thresholds: Vec<Option<f64>>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub history_features: bool,
    pub link_ridge: f64,
    pub refit_every: usize,
    pub refit_episodes: usize,
    pub blocks_per_episode: usize,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_tolerance")]
    pub feasibility_tolerance: f64,
    pub seed: u64,
}

fn default_beta0() -> f64 {
    0.5
}

fn default_sigma() -> f64 {
    1.0
}

fn default_tolerance() -> f64 {
    0.05
}

impl TrainConfig {
    pub fn threshold_values(&self) -> Vec<f64> {
        self.thresholds.iter().map(|t| t.unwrap_or(f64::INFINITY)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 || !(self.alpha0 > 0.0) || !(self.beta0 > 0.0) || !(self.link_ridge > 0.0) {
            return Err(Error::Config("mc_samples, alpha0, beta0 and link_ridge must be positive".into()));
        }
        if self.refit_every > 0 && (self.refit_episodes == 0 || self.blocks_per_episode == 0) {
            return Err(Error::Config("link refits need episodes and blocks per episode".into()));
        }
        Ok(())
    }

    pub fn alpha(&self, k: usize) -> f64 {
        if self.alpha_decay {
            self.alpha0 / (k.max(1) as f64).sqrt()
        } else {
            self.alpha0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub k: usize,
    pub j: f64,
    pub v: f64,
    pub c: Vec<f64>,
    pub eta: Vec<f64>,
    pub alpha: f64,
    pub accepted: bool,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format_version: u32,
    /// Completed iterations.
    pub k: usize,
    pub policy: PolicyParams,
    pub duals: DualVars,
    pub links: LinkWeights,
    pub log: Vec<LogRow>,
    /// On-policy windows accumulated by link refits.
    pub buffer: Vec<WindowSample>,
    pub flagged: Vec<bool>,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub tool_version: String,
}

impl TrainState {
    pub fn j_history(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.j).collect()
    }

    pub fn feasible(&self) -> bool {
        self.log.last().is_some_and(|r| r.feasible)
    }

    pub fn all_flagged(&self) -> bool {
        !self.flagged.is_empty() && self.flagged.iter().all(|&f| f)
    }
}

pub fn log_header(channels: usize) -> String {
    let mut cols = vec!["k".to_string(), "J".into(), "V".into()];
    cols.extend((1..=channels).map(|i| format!("C_{i}")));
    cols.extend((1..=channels).map(|i| format!("eta_{i}")));
    cols.extend(["alpha".into(), "accepted".into(), "feasible".into()]);
    cols.join(",")
}

pub fn log_line(row: &LogRow) -> String {
    let mut cols = vec![row.k.to_string(), format!("{:?}", row.j), format!("{:?}", row.v)];
    cols.extend(row.c.iter().map(|v| format!("{v:?}")));
    cols.extend(row.eta.iter().map(|v| format!("{v:?}")));
    cols.push(format!("{:?}", row.alpha));
    cols.push(u8::from(row.accepted).to_string());
    cols.push(u8::from(row.feasible).to_string());
    cols.join(",")
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Corrupt(e.to_string()))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v as u32,
                expected: CHECKPOINT_FORMAT_VERSION,
            })
        }
        None => return Err(Error::Corrupt("missing format_version".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Corrupt(e.to_string()))
}

/// Fixed inputs of a training run.
pub struct TrainContext<'a> {
    pub env: &'a EnvConfig,
    pub bundle: &'a OperatorBundle,
    pub batch: &'a HistoryBatch,
    /// Exploration windows the initial links are fit on; refits add the
    /// on-policy buffer to them.
    pub behavior: &'a [WindowSample],
}

pub fn init_state(config: &TrainConfig, ctx: &TrainContext<'_>) -> Result<TrainState> {
    config.validate()?;
    let descriptor = ctx.env.descriptor();
    if config.thresholds.len() != descriptor.risk_channels {
        return Err(Error::Config(format!(
            "{} thresholds for {} risk channels",
            config.thresholds.len(),
            descriptor.risk_channels
        )));
    }
    let space = BlockSpace::new(&descriptor.action, ctx.bundle.maps.window + 1);
    let policy = PolicyParams::zeros(ctx.bundle, space, config.sigma, config.history_features)?;
    let links = fit_links(ctx.behavior, &ctx.bundle.maps, config.link_ridge)?;
    Ok(TrainState {
        format_version: CHECKPOINT_FORMAT_VERSION,
        k: 0,
        policy,
        duals: DualVars::new(descriptor.risk_channels, config.beta0),
        links,
        log: vec![],
        buffer: vec![],
        flagged: vec![],
        seed: config.seed,
        config_hash: String::new(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
    })
}

/// Episodes whose first `L` actions are uniform and whose remaining actions
/// are open-loop blocks drawn from `policy`, one block per start history.
pub fn on_policy_windows(
    env: &EnvConfig,
    bundle: &OperatorBundle,
    policy: &PolicyParams,
    episodes: usize,
    blocks: usize,
    seed: u64,
    first_episode: u64,
) -> Result<Vec<WindowSample>> {
    let maps = &bundle.maps;
    let (l, w) = (maps.history_len, maps.window);
    let horizon = l + blocks * (w + 1);
    let uniform = env.descriptor().action;
    let trajs = rollout_with(env, episodes, horizon, seed, first_episode, &|steps, rng| {
        if steps.len() < l {
            return Ok(vec![uniform.sample_uniform(rng)]);
        }
        let pairs: Vec<(Datum, Datum)> = steps[steps.len() - l..]
            .iter()
            .map(|s| (s.action.clone(), s.observation.clone()))
            .collect();
        let x = policy.features(bundle, &maps.history_sparse(&pairs)?)?;
        policy.sample_with_features(&x, rng)
    })?;
    Ok(trajs
        .iter()
        .flat_map(|t| (0..blocks).filter_map(move |b| window_at_anchor(t, l + b * (w + 1), w, l)))
        .collect())
}

/// Runs iterations `state.k + 1 ..= until`, writing a checkpoint every
/// `checkpoint_every` iterations when `checkpoint` is given.
pub fn train_until(
    config: &TrainConfig,
    ctx: &TrainContext<'_>,
    mut state: TrainState,
    until: usize,
    checkpoint: Option<&Path>,
) -> Result<TrainState> {
    let thresholds = config.threshold_values();
    let tables = ModelTables::new(ctx.bundle, ctx.batch, &state.policy)?;
    let mut values = tables.values(&state.links);
    state.flagged = values.infeasible(&thresholds);
    while state.k < until {
        if state.all_flagged() {
            break;
        }
        let k = state.k + 1;
        let objective = Objective {
            tables: &tables,
            values: &values,
            weights: &ctx.batch.weights,
            excluded: &state.flagged,
            thresholds: &thresholds,
        };
        let step_seed = derive_seed(config.seed, &[purpose::POLICY, k as u64]);
        let outcome = policy_step(&state.policy, &objective, &state.duals.eta, config.alpha(k), config.mc_samples, step_seed)?;
        let eval = objective.evaluate(&outcome.policy, &state.duals.eta)?;
        let dual_input: Vec<f64> = eval
            .signal
            .iter()
            .zip(&eval.risks)
            .zip(&thresholds)
            .map(|((s, c), t)| if t.is_finite() { *s } else { *c })
            .collect();
        let duals = dual_step(&state.duals, &dual_input, &thresholds, state.duals.beta(k));
        let feasible = eval.worst_slack.iter().all(|s| *s <= config.feasibility_tolerance);
        state.log.push(LogRow {
            k,
            j: outcome.j_after,
            v: eval.value,
            c: eval.risks.clone(),
            eta: duals.eta.clone(),
            alpha: outcome.alpha,
            accepted: outcome.accepted,
            feasible,
        });
        state.policy = outcome.policy;
        state.duals = duals;
        state.k = k;
        if config.refit_every > 0 && k % config.refit_every == 0 && k < config.iterations {
            let first = (k / config.refit_every * config.refit_episodes) as u64;
            let fresh = on_policy_windows(
                ctx.env,
                ctx.bundle,
                &state.policy,
                config.refit_episodes,
                config.blocks_per_episode,
                derive_seed(config.seed, &[purpose::LINKS, k as u64]),
                first,
            )?;
            state.buffer.extend(fresh);
            let mut data = ctx.behavior.to_vec();
            data.extend(state.buffer.iter().cloned());
            state.links = fit_links(&data, &ctx.bundle.maps, config.link_ridge)?;
            values = tables.values(&state.links);
            state.flagged = values.infeasible(&thresholds);
        }
        if let Some(path) = checkpoint {
            if config.checkpoint_every > 0 && k % config.checkpoint_every == 0 {
                save_checkpoint(&state, path)?;
            }
        }
    }
    Ok(state)
}

pub fn train(config: &TrainConfig, ctx: &TrainContext<'_>, checkpoint: Option<&Path>) -> Result<TrainState> {
    let state = init_state(config, ctx)?;
    let out = train_until(config, ctx, state, config.iterations, checkpoint)?;
    if let Some(path) = checkpoint {
        save_checkpoint(&out, path)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lagrangian_examples() {
        assert_eq!(lagrangian(3.0, &[2.0], &[1.0], &[0.0]).unwrap(), 3.0);
        assert_eq!(lagrangian(3.0, &[0.5], &[1.0], &[4.0]).unwrap(), 3.0);
        assert_eq!(lagrangian(3.0, &[2.0], &[1.0], &[0.5]).unwrap(), 2.5);
        assert!(lagrangian(3.0, &[2.0], &[1.0, 2.0], &[0.5]).is_err());
    }

    #[test]
    fn dual_examples() {
        let d = DualVars {
            eta: vec![0.2],
            beta0: 0.5,
        };
        assert_eq!(dual_step(&d, &[1.0], &[1.0], 0.1).eta, vec![0.2]);
        assert!((dual_step(&d, &[2.0], &[1.0], 0.1).eta[0] - 0.3).abs() < 1e-15);
        let z = DualVars::new(1, 0.5);
        assert_eq!(dual_step(&z, &[0.5], &[1.0], 0.1).eta, vec![0.0]);
        assert!((z.beta(4) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn block_decoding_is_mixed_radix() {
        let s = BlockSpace::Discrete { alphabet: 2, len: 3 };
        assert_eq!(s.outputs(), 8);
        assert_eq!(s.decode(6), vec![Datum::Symbol(1), Datum::Symbol(1), Datum::Symbol(0)]);
    }

    #[test]
    fn log_schema() {
        assert_eq!(log_header(2), "k,J,V,C_1,C_2,eta_1,eta_2,alpha,accepted,feasible");
        let row = LogRow {
            k: 3,
            j: 1.5,
            v: 2.0,
            c: vec![1.0],
            eta: vec![0.0],
            alpha: 0.25,
            accepted: true,
            feasible: false,
        };
        assert_eq!(log_line(&row), "3,1.5,2.0,1.0,0.0,0.25,1,0");
    }
}
