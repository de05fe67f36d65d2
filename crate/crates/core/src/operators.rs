//! Covariance and conditional embedding operators, kernel Bayes rule, and the
//! forward / one-step / shifted / extended operators of the predictive state.
//!
//! Ridge convention: every estimator solves
//! `min_M (1/N)(Σ_j w_j ‖y_j − M x_j‖² + λ ‖M‖_F²)`, whose minimizer is
//! `M = Φ_Y W Φ_Xᵀ (Φ_X W Φ_Xᵀ + λI)⁻¹`. By the push-through identity this is
//! the Gram-form `Φ_Y (K_X + λI)⁻¹ Φ_Xᵀ` with λ applied to unnormalized
//! feature products; a λ on normalized covariances corresponds to `N·λ` here.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMaps, RegressionBlocks};
use crate::error::{Error, Result};
use crate::kernel::{FeatureVector, SpaceId};
use crate::linalg::{ridge_solve, FeatureMatrix, SparseVec};
use crate::link::LinkWeights;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Default cap on operator domain dimensions.
pub const DEFAULT_DIMENSION_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingOperator {
    /// `codomain-dim × domain-dim`.
    pub matrix: DMatrix<f64>,
    pub domain: SpaceId,
    pub codomain: SpaceId,
    pub ridge: f64,
    pub samples: usize,
    /// Value of the ridge objective at the returned solution.
    pub loss: f64,
}

impl EmbeddingOperator {
    pub fn domain_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn codomain_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<FeatureVector> {
        self.domain.ensure(&x.space)?;
        if x.len() != self.domain_dim() {
            return Err(Error::Shape(format!("domain vector of length {} for {} columns", x.len(), self.domain_dim())));
        }
        let v = &self.matrix * DVector::from_column_slice(&x.values);
        Ok(FeatureVector::new(v.iter().copied().collect(), self.codomain.clone()))
    }

    /// Prediction for a sparse domain vector known to live in the domain space.
    pub fn predict_sparse(&self, x: &SparseVec) -> Vec<f64> {
        let mut out = vec![0.0; self.codomain_dim()];
        for (&i, &v) in x.indices.iter().zip(&x.values) {
            for (r, o) in out.iter_mut().enumerate() {
                *o += self.matrix[(r, i as usize)] * v;
            }
        }
        out
    }
}

/// `(1/N) Φ_X Φ_Yᵀ`.
pub fn covariance(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<DMatrix<f64>> {
    if x.ncols() == 0 {
        return Err(Error::Empty("covariance needs at least one sample"));
    }
    Ok(x.weighted_cross(y, None)? / x.ncols() as f64)
}

fn check_cap(domain: &FeatureMatrix, cap: usize) -> Result<()> {
    if domain.dim() > cap {
        Err(Error::DimensionCap { dim: domain.dim(), cap })
    } else {
        Ok(())
    }
}

/// Weighted ridge regression of `target` columns on `domain` columns.
fn ridge_fit(
    target: &FeatureMatrix,
    domain: &FeatureMatrix,
    weights: Option<&[f64]>,
    ridge: f64,
    allow_lu: bool,
) -> Result<EmbeddingOperator> {
    if !(ridge > 0.0) || !ridge.is_finite() {
        return Err(Error::NonPositiveRidge(ridge));
    }
    if domain.ncols() == 0 {
        return Err(Error::Empty("regression needs at least one sample"));
    }
    let g = domain.weighted_cross(domain, weights)?;
    let c = target.weighted_cross(domain, weights)?;
    let m = ridge_solve(&g, &c.transpose(), ridge, allow_lu)?.transpose();
    let n = domain.ncols();
    let residual: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            let w = weights.map_or(1.0, |w| w[j]);
            if w == 0.0 {
                return 0.0;
            }
            let mut pred = vec![0.0; m.nrows()];
            let (di, dv) = domain.column(j);
            for (&i, &v) in di.iter().zip(dv) {
                for (r, p) in pred.iter_mut().enumerate() {
                    *p += m[(r, i as usize)] * v;
                }
            }
            let (ti, tv) = target.column(j);
            for (&i, &v) in ti.iter().zip(tv) {
                pred[i as usize] -= v;
            }
            w * pred.iter().map(|e| e * e).sum::<f64>()
        })
        .collect();
    let loss = (residual.iter().sum::<f64>() + ridge * m.norm_squared()) / n as f64;
    Ok(EmbeddingOperator {
        matrix: m,
        domain: domain.space().clone(),
        codomain: target.space().clone(),
        ridge,
        samples: n,
        loss,
    })
}

/// Gradient of the ridge objective at `op`, `(2/N)(M(G + λI) − C)`; zero at
/// the exact minimizer.
pub fn objective_gradient(op: &EmbeddingOperator, target: &FeatureMatrix, domain: &FeatureMatrix) -> Result<DMatrix<f64>> {
    let g = domain.weighted_cross(domain, None)?;
    let c = target.weighted_cross(domain, None)?;
    let n = domain.ncols() as f64;
    let reg = &g + DMatrix::identity(g.nrows(), g.ncols()) * op.ridge;
    Ok((&op.matrix * reg - c) * (2.0 / n))
}

/// Conditional embedding operator `Σ_{X|Y} = Φ_X Φ_Yᵀ (Φ_Y Φ_Yᵀ + λI)⁻¹`.
pub fn conditional_operator(phi_x: &FeatureMatrix, phi_y: &FeatureMatrix, ridge: f64) -> Result<EmbeddingOperator> {
    ridge_fit(phi_x, phi_y, None, ridge, false)
}

/// Kernel Bayes rule weights `Φ_Zᵀ (Φ_Z Φ_Zᵀ + λI)⁻¹ φ(z)`, one per sample.
pub fn kbr_weights(phi_z: &FeatureMatrix, z: &FeatureVector, ridge: f64) -> Result<Vec<f64>> {
    phi_z.space().ensure(&z.space)?;
    let g = phi_z.weighted_cross(phi_z, None)?;
    let rhs = DMatrix::from_column_slice(z.len(), 1, &z.values);
    let v = ridge_solve(&g, &rhs, ridge, false)?;
    Ok(phi_z.tr_mul_vec(v.as_slice()))
}

/// Operator `ℋ_Y → ℋ_X` conditioned on the point `z`:
/// `Φ_X Ψ Φ_Yᵀ (Φ_Y Ψ Φ_Yᵀ + λI)⁻¹` with `Ψ = N·diag(kbr_weights)`.
///
/// The factor `N` puts the reweighted products on the same scale as the
/// unweighted ones, so a constant `Z` reproduces [`conditional_operator`].
/// Weights may be negative; the system then falls back to LU.
pub fn kbr_conditional(
    phi_x: &FeatureMatrix,
    phi_y: &FeatureMatrix,
    phi_z: &FeatureMatrix,
    z: &FeatureVector,
    ridge: f64,
) -> Result<EmbeddingOperator> {
    if !(ridge > 0.0) {
        return Err(Error::NonPositiveRidge(ridge));
    }
    let n = phi_z.ncols() as f64;
    let psi: Vec<f64> = kbr_weights(phi_z, z, ridge)?.into_iter().map(|w| n * w).collect();
    ridge_fit(phi_x, phi_y, Some(&psi), ridge, true)
}

/// Default ridge: `c·√K` with `c = 0.1 ×` mean diagonal of the domain second
/// moment, i.e. `c·K^{-1/2}` on the normalized-covariance scale.
pub fn default_ridge(domain: &FeatureMatrix) -> f64 {
    let k = domain.ncols().max(1) as f64;
    let mut trace = 0.0;
    for j in 0..domain.ncols() {
        trace += domain.column(j).1.iter().map(|v| v * v).sum::<f64>();
    }
    let c = 0.1 * trace / k / domain.dim().max(1) as f64;
    (c * k.sqrt()).max(f64::MIN_POSITIVE)
}

/// `φ^H(h) ⊗ φ^𝒜(t_h(a)) ↦ φ^𝒪(t_h(o))`.
pub fn fit_forward(blocks: &RegressionBlocks, ridge: f64, cap: usize) -> Result<EmbeddingOperator> {
    let domain = blocks.history.khatri_rao(&blocks.action_block)?;
    check_cap(&domain, cap)?;
    ridge_fit(&blocks.observation_block, &domain, None, ridge, false)
}

/// `φ^H(h) ⊗ φ^a(a_{t-1}) ↦ φ^o(o_t)`.
pub fn fit_one_step(blocks: &RegressionBlocks, ridge: f64, cap: usize) -> Result<EmbeddingOperator> {
    let domain = blocks.history.khatri_rao(&blocks.action)?;
    check_cap(&domain, cap)?;
    ridge_fit(&blocks.observation, &domain, None, ridge, false)
}

/// Forward operator fit directly on the shifted windows,
/// `φ^H(h_{t+1}) ⊗ φ^𝒜(t_{h+1}(a)) ↦ φ^𝒪(t_{h+1}(o))`.
pub fn fit_shifted_forward(blocks: &RegressionBlocks, ridge: f64, cap: usize) -> Result<EmbeddingOperator> {
    let domain = blocks.next_history.khatri_rao(&blocks.shifted_action_block)?;
    check_cap(&domain, cap)?;
    ridge_fit(&blocks.shifted_observation_block, &domain, None, ridge, false)
}

/// `φ^H(h) ⊗ φ^𝒜(t_{h+1}(a)) ⊗ φ^a(a_{t-1}) ↦ φ^𝒪(t_{h+1}(o)) ⊗ φ^o(o_t)`.
pub fn fit_extended(blocks: &RegressionBlocks, ridge: f64, cap: usize) -> Result<EmbeddingOperator> {
    let domain = blocks
        .history
        .khatri_rao(&blocks.shifted_action_block)?
        .khatri_rao(&blocks.action)?;
    check_cap(&domain, cap)?;
    let target = blocks.shifted_observation_block.khatri_rao(&blocks.observation)?;
    ridge_fit(&target, &domain, None, ridge, false)
}

/// The lifted operator `𝒫`, stored as one 3-mode array: contracting the
/// pair feature `u = φ^o(o) ⊗ φ^a(a)` gives the square matrix `𝒫_{o,a}`
/// acting on observation-block embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedOperator {
    /// `d_𝒪 × (d_u · d_𝒪)`; column `k·d_𝒪 + j` is column `j` of slice `k`.
    pub tensor: DMatrix<f64>,
    pub pair_space: SpaceId,
    pub embedding_space: SpaceId,
    pub ridge: f64,
    pub samples: usize,
    pub loss: f64,
}

impl ShiftedOperator {
    pub fn embedding_dim(&self) -> usize {
        self.tensor.nrows()
    }

    pub fn pair_dim(&self) -> usize {
        self.tensor.ncols() / self.tensor.nrows()
    }

    /// `𝒫_{o,a} = Σ_k u_k P_k`.
    pub fn lift(&self, u: &FeatureVector) -> Result<DMatrix<f64>> {
        self.pair_space.ensure(&u.space)?;
        Ok(self.lift_sparse(&u.sparse()))
    }

    pub fn lift_sparse(&self, u: &SparseVec) -> DMatrix<f64> {
        let d = self.embedding_dim();
        let mut out = DMatrix::zeros(d, d);
        for (&k, &w) in u.indices.iter().zip(&u.values) {
            out += self.tensor.columns(k as usize * d, d) * w;
        }
        out
    }

    pub fn apply(&self, u: &FeatureVector, v: &FeatureVector) -> Result<FeatureVector> {
        self.embedding_space.ensure(&v.space)?;
        let m = self.lift(u)?;
        let out = m * DVector::from_column_slice(&v.values);
        Ok(FeatureVector::new(out.iter().copied().collect(), self.embedding_space.clone()))
    }
}

/// Fits `𝒫` by minimizing `Σ_j ‖𝒫_{u_j} μ_j − φ^𝒪(t_{h+1}(o))_j‖² + λ‖𝒫‖²`
/// where `μ_j` is the forward prediction at history `h_t` and the shifted
/// action block `t_{h+1}(a)`.
pub fn fit_shifted(blocks: &RegressionBlocks, forward: &EmbeddingOperator, ridge: f64, cap: usize) -> Result<ShiftedOperator> {
    let pair = blocks.observation.khatri_rao(&blocks.action)?;
    let domain = blocks.history.khatri_rao(&blocks.shifted_action_block)?;
    forward.domain.ensure(domain.space())?;
    let d = forward.codomain_dim();
    let regressor_dim = pair.dim() * d;
    if regressor_dim > cap {
        return Err(Error::DimensionCap { dim: regressor_dim, cap });
    }
    let cols: Vec<SparseVec> = (0..domain.ncols())
        .into_par_iter()
        .map(|j| {
            let mu = SparseVec::from_dense(&forward.predict_sparse(&domain.column_sparse(j)));
            pair.column_sparse(j).kron(&mu, d)
        })
        .collect();
    let mut regressor = FeatureMatrix::new(regressor_dim, pair.space().tensor(&forward.codomain));
    for c in &cols {
        regressor.push(c);
    }
    let op = ridge_fit(&blocks.shifted_observation_block, &regressor, None, ridge, false)?;
    Ok(ShiftedOperator {
        tensor: op.matrix,
        pair_space: pair.space().clone(),
        embedding_space: forward.codomain.clone(),
        ridge,
        samples: op.samples,
        loss: op.loss,
    })
}

/// Clips negatives and renormalizes; evaluation-only postprocessing.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let s: f64 = clipped.iter().sum();
    if s > 0.0 {
        clipped.iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub ridge: f64,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub tool_version: String,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorBundle {
    pub format_version: u32,
    pub maps: FeatureMaps,
    pub one_step: EmbeddingOperator,
    pub forward: EmbeddingOperator,
    pub shifted_forward: EmbeddingOperator,
    pub shifted: ShiftedOperator,
    pub extended: EmbeddingOperator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub links: Option<LinkWeights>,
    pub meta: FitMeta,
}

/// Fits all five operators on one set of regression blocks.
pub fn fit_bundle(blocks: &RegressionBlocks, maps: &FeatureMaps, ridge: f64, cap: usize, seed: u64) -> Result<OperatorBundle> {
    let forward = fit_forward(blocks, ridge, cap)?;
    let one_step = fit_one_step(blocks, ridge, cap)?;
    let shifted_forward = fit_shifted_forward(blocks, ridge, cap)?;
    let shifted = fit_shifted(blocks, &forward, ridge, cap)?;
    let extended = fit_extended(blocks, ridge, cap)?;
    let losses = [
        ("one_step", one_step.loss),
        ("forward", forward.loss),
        ("shifted_forward", shifted_forward.loss),
        ("shifted", shifted.loss),
        ("extended", extended.loss),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let bundle = OperatorBundle {
        format_version: BUNDLE_FORMAT_VERSION,
        maps: maps.clone(),
        meta: FitMeta {
            ridge,
            samples: blocks.len(),
            seed,
            config_hash: String::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            losses,
        },
        one_step,
        forward,
        shifted_forward,
        shifted,
        extended,
        links: None,
    };
    bundle.check_spaces()?;
    Ok(bundle)
}

impl OperatorBundle {
    fn expected_spaces(&self) -> [(&'static str, SpaceId, &SpaceId); 10] {
        let m = &self.maps;
        let h = m.history.space();
        let ab = m.action_block.space();
        let ob = m.observation_block.space();
        let a = m.action.space();
        let o = m.observation.space();
        [
            ("one_step.domain", h.tensor(a), &self.one_step.domain),
            ("one_step.codomain", o.clone(), &self.one_step.codomain),
            ("forward.domain", h.tensor(ab), &self.forward.domain),
            ("forward.codomain", ob.clone(), &self.forward.codomain),
            ("shifted_forward.domain", h.tensor(ab), &self.shifted_forward.domain),
            ("shifted_forward.codomain", ob.clone(), &self.shifted_forward.codomain),
            ("shifted.pair", o.tensor(a), &self.shifted.pair_space),
            ("shifted.embedding", ob.clone(), &self.shifted.embedding_space),
            ("extended.domain", h.tensor(ab).tensor(a), &self.extended.domain),
            ("extended.codomain", ob.tensor(o), &self.extended.codomain),
        ]
    }

    /// Verifies that every operator lives on the spaces of the bundle's maps.
    pub fn check_spaces(&self) -> Result<()> {
        for (_, expected, found) in self.expected_spaces() {
            expected.ensure(found)?;
        }
        if let Some(links) = &self.links {
            links.space.ensure(&crate::link::link_space(&self.maps))?;
        }
        Ok(())
    }

    /// `F_h`: the forward operator restricted to a history feature,
    /// `d_𝒪 × d_𝒜`.
    pub fn forward_slice(&self, history: &[f64]) -> DMatrix<f64> {
        slice_by_history(&self.forward.matrix, history, self.maps.action_block.output_dim())
    }

    pub fn one_step_slice(&self, history: &[f64]) -> DMatrix<f64> {
        slice_by_history(&self.one_step.matrix, history, self.maps.action.output_dim())
    }

    pub fn shifted_forward_slice(&self, history: &[f64]) -> DMatrix<f64> {
        slice_by_history(&self.shifted_forward.matrix, history, self.maps.action_block.output_dim())
    }

    /// Pair feature `φ^o(o) ⊗ φ^a(a)`.
    pub fn pair_feature(&self, action: &crate::kernel::Datum, observation: &crate::kernel::Datum) -> Result<SparseVec> {
        let o = self.maps.observation.embed_sparse(&[observation])?;
        let a = self.maps.action.embed_sparse(&[action])?;
        Ok(o.kron(&a, self.maps.action.output_dim()))
    }
}

/// `Σ_i h_i M[:, i·d .. (i+1)·d]` for a matrix over `H ⊗ X` with `dim X = d`.
pub fn slice_by_history(m: &DMatrix<f64>, history: &[f64], d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), d);
    for (i, &h) in history.iter().enumerate() {
        if h != 0.0 {
            out += m.columns(i * d, d) * h;
        }
    }
    out
}

pub fn save_bundle(bundle: &OperatorBundle, path: &Path) -> Result<()> {
    let text = serde_json::to_string(bundle)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<OperatorBundle> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Corrupt(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corrupt("missing format_version".into()))?;
    if version != BUNDLE_FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: BUNDLE_FORMAT_VERSION,
        });
    }
    let bundle: OperatorBundle = serde_json::from_str(&text).map_err(|e| Error::Corrupt(e.to_string()))?;
    bundle.check_spaces()?;
    Ok(bundle)
}
