//! Value and risk link functions.
//!
//! A link is a weight vector over `1 ⊕ φ^H(h) ⊗ φ^o(o_t) ⊗ φ^𝒪(o_{t+1:t+W})`,
//! fit by ridge regression of the observed `(W+1)`-step return (or risk sum).
//! Values are evaluated through the operators: the one-step operator gives
//! the distribution of `o_t`, and `𝒫_{o_t,a_{t-1}}` applied to the forward
//! prediction gives the embedding of the following `W` observations. Both
//! terms are slices of the same expected link feature, so value and risk
//! evaluation differ only in the weight vector.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMaps, WindowSample};
use crate::error::{Error, Result};
use crate::kernel::{Datum, SpaceId};
use crate::linalg::{ridge_solve, FeatureMatrix, SparseVec};
use crate::operators::OperatorBundle;
use crate::safe_opt::PolicyParams;
use crate::seed::{purpose, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkWeights {
    /// Value link.
    pub g: Vec<f64>,
    /// One risk link per channel.
    pub m: Vec<Vec<f64>>,
    pub ridge: f64,
    pub samples: usize,
    pub space: SpaceId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub risks: Vec<f64>,
    pub mc_samples: usize,
    pub seed: u64,
}

pub fn link_space(maps: &FeatureMaps) -> SpaceId {
    let inner = maps
        .history
        .space()
        .tensor(maps.observation.space())
        .tensor(maps.observation_block.space());
    SpaceId::new(format!("1⊕{}", inner.as_str()))
}

pub fn link_dim(maps: &FeatureMaps) -> usize {
    1 + maps.history.output_dim() * maps.observation.output_dim() * maps.observation_block.output_dim()
}

/// `1 ⊕ h ⊗ o ⊗ o⁺` for sparse parts.
pub fn link_feature(maps: &FeatureMaps, history: &SparseVec, observation: &SparseVec, shifted: &SparseVec) -> SparseVec {
    let inner = history
        .kron(observation, maps.observation.output_dim())
        .kron(shifted, maps.observation_block.output_dim());
    let mut indices = Vec::with_capacity(inner.indices.len() + 1);
    let mut values = Vec::with_capacity(inner.indices.len() + 1);
    indices.push(0);
    values.push(1.0);
    indices.extend(inner.indices.iter().map(|i| i + 1));
    values.extend_from_slice(&inner.values);
    SparseVec { indices, values }
}

fn window_link_feature(maps: &FeatureMaps, w: &WindowSample) -> Result<SparseVec> {
    let h = maps.history_sparse(&w.history)?;
    let o = FeatureMaps::single_sparse(&maps.observation, &w.one_step.1)?;
    let s = FeatureMaps::block_sparse(&maps.observation_block, &w.shifted_observations)?;
    Ok(link_feature(maps, &h, &o, &s))
}

pub fn link_matrix(samples: &[WindowSample], maps: &FeatureMaps) -> Result<FeatureMatrix> {
    let cols: Vec<SparseVec> = samples
        .par_iter()
        .map(|w| window_link_feature(maps, w))
        .collect::<Result<_>>()?;
    let mut phi = FeatureMatrix::new(link_dim(maps), link_space(maps));
    for c in &cols {
        phi.push(c);
    }
    Ok(phi)
}

/// Ridge regression of the extended return and each extended risk sum onto
/// the link features of `samples`.
pub fn fit_links(samples: &[WindowSample], maps: &FeatureMaps, ridge: f64) -> Result<LinkWeights> {
    if samples.is_empty() {
        return Err(Error::Empty("link fitting needs at least one window"));
    }
    let phi = link_matrix(samples, maps)?;
    let returns: Vec<f64> = samples.iter().map(|w| w.extended_return).collect();
    let channels = samples[0].extended_risks.len();
    let risks: Vec<Vec<f64>> = (0..channels)
        .map(|i| samples.iter().map(|w| w.extended_risks[i]).collect())
        .collect();
    fit_links_matrix(&phi, &returns, &risks, ridge)
}

pub fn fit_links_matrix(phi: &FeatureMatrix, returns: &[f64], risks: &[Vec<f64>], ridge: f64) -> Result<LinkWeights> {
    if !(ridge > 0.0) {
        return Err(Error::NonPositiveRidge(ridge));
    }
    if phi.ncols() == 0 {
        return Err(Error::Empty("link fitting needs at least one window"));
    }
    if returns.len() != phi.ncols() || risks.iter().any(|r| r.len() != phi.ncols()) {
        return Err(Error::Shape("link targets do not match the feature columns".into()));
    }
    let g = phi.weighted_cross(phi, None)?;
    let mut rhs = DMatrix::zeros(phi.dim(), 1 + risks.len());
    rhs.set_column(0, &phi.mul_vec(returns));
    for (i, r) in risks.iter().enumerate() {
        rhs.set_column(i + 1, &phi.mul_vec(r));
    }
    let w = ridge_solve(&g, &rhs, ridge, false)?;
    Ok(LinkWeights {
        g: w.column(0).iter().copied().collect(),
        m: (0..risks.len()).map(|i| w.column(i + 1).iter().copied().collect()).collect(),
        ridge,
        samples: phi.ncols(),
        space: phi.space().clone(),
    })
}

impl LinkWeights {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn risk_channels(&self) -> usize {
        self.m.len()
    }

    /// `(⟨g, ψ⟩, ⟨m_i, ψ⟩)`.
    pub fn apply(&self, psi: &[f64]) -> (f64, Vec<f64>) {
        let dot = |w: &[f64]| w.iter().zip(psi).map(|(a, b)| a * b).sum::<f64>();
        (dot(&self.g), self.m.iter().map(|m| dot(m)).collect())
    }

    pub fn apply_sparse(&self, psi: &SparseVec) -> (f64, Vec<f64>) {
        (psi.dot_dense(&self.g), self.m.iter().map(|m| psi.dot_dense(m)).collect())
    }

    pub fn scaled(&self, s: f64) -> LinkWeights {
        let mut out = self.clone();
        out.g.iter_mut().for_each(|v| *v *= s);
        out.m.iter_mut().flatten().for_each(|v| *v *= s);
        out
    }
}

/// Per-history operator slices reused across blocks.
#[derive(Debug, Clone)]
pub struct HistoryModel {
    pub history: SparseVec,
    one_step: DMatrix<f64>,
    forward: DMatrix<f64>,
}

impl HistoryModel {
    pub fn new(bundle: &OperatorBundle, history: SparseVec) -> Self {
        let dense = history.to_dense(bundle.maps.history.output_dim());
        HistoryModel {
            one_step: bundle.one_step_slice(&dense),
            forward: bundle.forward_slice(&dense),
            history,
        }
    }

    pub fn from_pairs(bundle: &OperatorBundle, pairs: &[(Datum, Datum)]) -> Result<Self> {
        Ok(Self::new(bundle, bundle.maps.history_sparse(pairs)?))
    }

    /// Predicted `φ^o(o_t)` after `a_{t-1}`.
    pub fn one_step(&self, action: &[f64]) -> DVector<f64> {
        &self.one_step * DVector::from_column_slice(action)
    }

    /// Forward prediction `F_h φ^𝒜(actions)`.
    pub fn forward(&self, block: &[f64]) -> DVector<f64> {
        &self.forward * DVector::from_column_slice(block)
    }

    /// Model expectation of the link feature for the action block
    /// `(a_{t-1}, a_t, …, a_{t+W-1})`:
    /// `1 ⊕ φ^H(h) ⊗ Σ_o p̂(o|h,a_{t-1}) e_o ⊗ 𝒫_{o,a_{t-1}} F_h φ^𝒜(a_{t:t+W-1})`.
    pub fn expected_link_feature(&self, bundle: &OperatorBundle, block: &[Datum]) -> Result<SparseVec> {
        let maps = &bundle.maps;
        if block.len() != maps.window + 1 {
            return Err(Error::Shape(format!("action block of length {} for window {}", block.len(), maps.window)));
        }
        let no = match (maps.observation.alphabet(), maps.observation.output_dim()) {
            (Some(n), d) if n == d => n,
            _ => {
                return Err(Error::Unsupported(
                    "value evaluation enumerates o_t and needs one-hot observation features".into(),
                ))
            }
        };
        let a = FeatureMaps::single_sparse(&maps.action, &block[0])?;
        let a_dense = a.to_dense(maps.action.output_dim());
        let p = self.one_step(&a_dense);
        let shifted = FeatureMaps::block_sparse(&maps.action_block, &block[1..])?;
        let mu = self.forward(&shifted.to_dense(maps.action_block.output_dim()));
        let d = maps.observation_block.output_dim();
        let mut inner = vec![0.0; no * d];
        for o in 0..no {
            if p[o] == 0.0 {
                continue;
            }
            let u = SparseVec {
                indices: vec![o as u32],
                values: vec![1.0],
            }
            .kron(&a, maps.action.output_dim());
            let v = bundle.shifted.lift_sparse(&u) * &mu;
            for j in 0..d {
                inner[o * d + j] = p[o] * v[j];
            }
        }
        let inner = SparseVec::from_dense(&inner);
        let full = self.history.kron(&inner, no * d);
        let mut indices = vec![0];
        let mut values = vec![1.0];
        indices.extend(full.indices.iter().map(|i| i + 1));
        values.extend_from_slice(&full.values);
        Ok(SparseVec { indices, values })
    }
}

/// `(V̂, Ĉ)` of one action block at one history.
pub fn block_value(links: &LinkWeights, bundle: &OperatorBundle, model: &HistoryModel, block: &[Datum]) -> Result<(f64, Vec<f64>)> {
    links.space.ensure(&link_space(&bundle.maps))?;
    Ok(links.apply_sparse(&model.expected_link_feature(bundle, block)?))
}

/// Monte Carlo average of the expected link feature over `mc_samples` blocks
/// drawn from `policy`. The draws depend only on `seed`, so two calls with the
/// same seed share random numbers.
pub fn policy_link_feature(
    bundle: &OperatorBundle,
    model: &HistoryModel,
    policy: &PolicyParams,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if mc_samples == 0 {
        return Err(Error::Config("mc-samples must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, &[purpose::VALUE]);
    let x = policy.features(bundle, &model.history)?;
    let mut cache: HashMap<Vec<u64>, SparseVec> = HashMap::new();
    let mut acc = vec![0.0; link_dim(&bundle.maps)];
    for _ in 0..mc_samples {
        let block = policy.sample_with_features(&x, &mut rng)?;
        let key: Vec<u64> = block
            .iter()
            .flat_map(|d| match d {
                Datum::Symbol(s) => vec![*s as u64],
                Datum::Vector(v) => v.iter().map(|f| f.to_bits()).collect(),
                Datum::Sentinel => vec![u64::MAX],
            })
            .collect();
        if !cache.contains_key(&key) {
            let psi = model.expected_link_feature(bundle, &block)?;
            cache.insert(key.clone(), psi);
        }
        let psi = &cache[&key];
        for (&i, &v) in psi.indices.iter().zip(&psi.values) {
            acc[i as usize] += v;
        }
    }
    let n = mc_samples as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Operator-driven `V^π(h)` and `C_i^π(h)`.
pub fn eval_value(
    links: &LinkWeights,
    bundle: &OperatorBundle,
    history: &[(Datum, Datum)],
    policy: &PolicyParams,
    mc_samples: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    links.space.ensure(&link_space(&bundle.maps))?;
    let model = HistoryModel::from_pairs(bundle, history)?;
    let psi = policy_link_feature(bundle, &model, policy, mc_samples, seed)?;
    let (value, risks) = links.apply(&psi);
    Ok(ValueEstimate {
        value,
        risks,
        mc_samples,
        seed,
    })
}

/// `mean_h [g₁ under π₁ − g₂ under π₂]` with common random numbers per history.
pub fn bellman_loss(
    first: (&LinkWeights, &PolicyParams),
    second: (&LinkWeights, &PolicyParams),
    histories: &[Vec<(Datum, Datum)>],
    bundle: &OperatorBundle,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    if histories.is_empty() {
        return Err(Error::Empty("Bellman loss needs at least one history"));
    }
    let diffs: Vec<f64> = histories
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let s = crate::seed::derive_seed(seed, &[purpose::EVAL, i as u64]);
            let a = eval_value(first.0, bundle, h, first.1, mc_samples, s)?;
            let b = eval_value(second.0, bundle, h, second.1, mc_samples, s)?;
            Ok(a.value - b.value)
        })
        .collect::<Result<_>>()?;
    Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
}
