//! Finite feature maps standing in for RKHS feature maps.
//!
//! Three base kernels are supported: one-hot (discrete alphabets, the exact
//! feature map of the delta kernel), random Fourier features for the Gaussian
//! kernel, and linear features. Block and history maps compose per-element
//! features by Kronecker product (default) or concatenation.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::SparseVec;

/// Identifier of a feature space; binary operations check it.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpaceId(Arc<str>);

impl SpaceId {
    pub fn new(s: impl AsRef<str>) -> Self {
        SpaceId(Arc::from(s.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn tensor(&self, other: &SpaceId) -> SpaceId {
        SpaceId::new(format!("({})⊗({})", self.0, other.0))
    }

    pub fn ensure(&self, other: &SpaceId) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::SpaceMismatch {
                expected: self.0.to_string(),
                found: other.0.to_string(),
            })
        }
    }
}

impl fmt::Debug for SpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for SpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A raw action or observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Datum {
    Symbol(u32),
    Vector(Vec<f64>),
    /// Left padding for histories shorter than the suffix length.
    Sentinel,
}

impl fmt::Display for Datum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Datum::Symbol(s) => write!(f, "{s}"),
            Datum::Vector(v) => {
                let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
                write!(f, "[{}]", parts.join(";"))
            }
            Datum::Sentinel => write!(f, "_"),
        }
    }
}

impl Datum {
    pub fn symbol(&self) -> Option<u32> {
        match self {
            Datum::Symbol(s) => Some(*s),
            _ => None,
        }
    }

    pub fn as_slice(&self) -> Option<&[f64]> {
        match self {
            Datum::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Datum::Vector(v) => v.iter().all(|x| x.is_finite()),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    OneHot {
        alphabet: usize,
    },
    RadialBasis {
        input_dim: usize,
        bandwidth: f64,
        features: usize,
        seed: u64,
    },
    Linear {
        input_dim: usize,
        #[serde(default)]
        affine: bool,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::OneHot { alphabet } => {
                if alphabet == 0 {
                    return Err(Error::NonPositiveDimension(alphabet));
                }
            }
            KernelSpec::RadialBasis {
                input_dim,
                bandwidth,
                features,
                ..
            } => {
                if input_dim == 0 {
                    return Err(Error::NonPositiveDimension(input_dim));
                }
                if features == 0 {
                    return Err(Error::NonPositiveDimension(features));
                }
                if features % 2 != 0 {
                    return Err(Error::InvalidKernel(format!(
                        "radial-basis features come in cos/sin pairs, got odd count {features}"
                    )));
                }
                if !(bandwidth > 0.0) || !bandwidth.is_finite() {
                    return Err(Error::InvalidKernel(format!(
                        "radial-basis bandwidth must be positive, got {bandwidth}"
                    )));
                }
            }
            KernelSpec::Linear { input_dim, .. } => {
                if input_dim == 0 {
                    return Err(Error::NonPositiveDimension(input_dim));
                }
            }
        }
        Ok(())
    }

    /// Exact kernel value between two raw inputs (not the feature approximation).
    pub fn evaluate(&self, x: &Datum, y: &Datum) -> Result<f64> {
        match (self, x, y) {
            (KernelSpec::OneHot { .. }, Datum::Symbol(a), Datum::Symbol(b)) => {
                Ok(if a == b { 1.0 } else { 0.0 })
            }
            (KernelSpec::RadialBasis { bandwidth, .. }, Datum::Vector(a), Datum::Vector(b)) => {
                let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
                Ok((-d2 / (2.0 * bandwidth * bandwidth)).exp())
            }
            (KernelSpec::Linear { affine, .. }, Datum::Vector(a), Datum::Vector(b)) => {
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                Ok(if *affine { 1.0 + dot } else { dot })
            }
            _ => Err(Error::Shape(format!("inputs {x:?}, {y:?} do not fit {self:?}"))),
        }
    }
}

/// How many raw elements a map consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arity {
    Single,
    /// A test window of W steps.
    Block(usize),
    /// A history suffix of L steps; short histories are left-padded with
    /// [`Datum::Sentinel`].
    Suffix(usize),
}

impl Arity {
    pub fn len(&self) -> usize {
        match *self {
            Arity::Single => 1,
            Arity::Block(w) | Arity::Suffix(w) => w,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    #[default]
    Tensor,
    /// Concatenation of per-element features. Cheaper, but a linear functional
    /// over it is additive across elements: an approximation of the tensor map.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FourierWeights {
    /// `features/2 × input_dim` frequencies, row-major.
    omega: Vec<f64>,
}

/// A deterministic map from raw inputs to a fixed-length feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    role: String,
    spec: KernelSpec,
    arity: Arity,
    composition: Composition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fourier: Option<FourierWeights>,
    space: SpaceId,
}

/// Builds a feature map; random Fourier weights are drawn once from the seed in the feature definition.
pub fn make_feature_map(
    role: &str,
    spec: KernelSpec,
    arity: Arity,
    composition: Composition,
) -> Result<FeatureMap> {
    spec.validate()?;
    if arity.is_empty() {
        return Err(Error::NonPositiveDimension(0));
    }
    let fourier = match spec {
        KernelSpec::RadialBasis {
            input_dim,
            bandwidth,
            features,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let omega = (0..features / 2 * input_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z / bandwidth
                })
                .collect();
            Some(FourierWeights { omega })
        }
        _ => None,
    };
    let mut map = FeatureMap {
        role: role.to_string(),
        spec,
        arity,
        composition,
        fourier,
        space: SpaceId::new(""),
    };
    map.space = map.derive_space_id();
    Ok(map)
}

impl FeatureMap {
    fn derive_space_id(&self) -> SpaceId {
        let blob = serde_json::to_string(&(&self.spec, &self.arity, &self.composition))
            .expect("kernel spec serializes");
        let digest = Sha256::digest(blob.as_bytes());
        let short: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        SpaceId::new(format!("{}:{}", self.role, short))
    }

    pub fn space(&self) -> &SpaceId {
        &self.space
    }

    pub fn role(&self) -> &str {
        &self.role
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn arity(&self) -> Arity {
        self.arity
    }

    pub fn composition(&self) -> Composition {
        self.composition
    }

    fn padded(&self) -> bool {
        matches!(self.arity, Arity::Suffix(_))
    }

    /// Dimension of the per-element feature.
    pub fn element_dim(&self) -> usize {
        match self.spec {
            KernelSpec::OneHot { alphabet } => alphabet + usize::from(self.padded()),
            KernelSpec::RadialBasis { features, .. } => features,
            KernelSpec::Linear { input_dim, affine } => {
                if affine && self.composition == Composition::Tensor {
                    input_dim + 1
                } else {
                    input_dim
                }
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        let n = self.arity.len();
        let e = self.element_dim();
        match self.composition {
            Composition::Tensor => e.pow(n as u32),
            Composition::Concat => {
                let affine = matches!(self.spec, KernelSpec::Linear { affine: true, .. });
                n * e + usize::from(affine)
            }
        }
    }

    /// Number of distinct raw symbols when the map is one-hot.
    pub fn alphabet(&self) -> Option<usize> {
        match self.spec {
            KernelSpec::OneHot { alphabet } => Some(alphabet),
            _ => None,
        }
    }

    fn embed_element(&self, x: &Datum) -> Result<SparseVec> {
        match (&self.spec, x) {
            (KernelSpec::OneHot { alphabet }, Datum::Symbol(s)) => {
                if (*s as usize) >= *alphabet {
                    return Err(Error::Shape(format!("symbol {s} outside alphabet of size {alphabet}")));
                }
                Ok(SparseVec {
                    indices: vec![*s],
                    values: vec![1.0],
                })
            }
            (KernelSpec::OneHot { alphabet }, Datum::Sentinel) if self.padded() => Ok(SparseVec {
                indices: vec![*alphabet as u32],
                values: vec![1.0],
            }),
            (KernelSpec::RadialBasis { input_dim, features, .. }, Datum::Vector(v)) => {
                if v.len() != *input_dim {
                    return Err(Error::Shape(format!("expected {input_dim}-vector, got {}", v.len())));
                }
                let w = self.fourier.as_ref().expect("radial-basis maps carry weights");
                // [cos(ω·x), sin(ω·x)] per frequency, so ‖φ(x)‖ = 1 exactly
                let half = *features / 2;
                let scale = (1.0 / half as f64).sqrt();
                let mut dense = vec![0.0; *features];
                for k in 0..half {
                    let row = &w.omega[k * input_dim..(k + 1) * input_dim];
                    let z: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                    dense[2 * k] = scale * z.cos();
                    dense[2 * k + 1] = scale * z.sin();
                }
                Ok(SparseVec::from_dense(&dense))
            }
            (KernelSpec::RadialBasis { .. }, Datum::Sentinel) if self.padded() => Ok(SparseVec::default()),
            (KernelSpec::Linear { input_dim, affine }, Datum::Vector(v)) => {
                if v.len() != *input_dim {
                    return Err(Error::Shape(format!("expected {input_dim}-vector, got {}", v.len())));
                }
                if *affine && self.composition == Composition::Tensor {
                    let mut dense = Vec::with_capacity(v.len() + 1);
                    dense.push(1.0);
                    dense.extend_from_slice(v);
                    Ok(SparseVec::from_dense(&dense))
                } else {
                    Ok(SparseVec::from_dense(v))
                }
            }
            (KernelSpec::Linear { affine, .. }, Datum::Sentinel) if self.padded() => {
                if *affine && self.composition == Composition::Tensor {
                    Ok(SparseVec {
                        indices: vec![0],
                        values: vec![1.0],
                    })
                } else {
                    Ok(SparseVec::default())
                }
            }
            _ => Err(Error::Shape(format!(
                "input {x:?} does not fit the `{}` map ({:?})",
                self.role, self.spec
            ))),
        }
    }

    /// Sparse embedding of a full input (one element per arity slot).
    pub fn embed_sparse(&self, input: &[&Datum]) -> Result<SparseVec> {
        let n = self.arity.len();
        if input.len() != n {
            return Err(Error::Shape(format!(
                "`{}` map expects {n} elements, got {}",
                self.role,
                input.len()
            )));
        }
        let e = self.element_dim();
        match self.composition {
            Composition::Tensor => {
                let mut acc = SparseVec {
                    indices: vec![0],
                    values: vec![1.0],
                };
                for x in input {
                    acc = acc.kron(&self.embed_element(x)?, e);
                }
                Ok(acc)
            }
            Composition::Concat => {
                let affine = matches!(self.spec, KernelSpec::Linear { affine: true, .. });
                let offset0 = usize::from(affine);
                let mut out = SparseVec::default();
                if affine {
                    out.indices.push(0);
                    out.values.push(1.0);
                }
                for (k, x) in input.iter().enumerate() {
                    let part = self.embed_element(x)?;
                    for (&i, &v) in part.indices.iter().zip(&part.values) {
                        out.indices.push((offset0 + k * e + i as usize) as u32);
                        out.values.push(v);
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn embed(&self, input: &[Datum]) -> Result<FeatureVector> {
        let refs: Vec<&Datum> = input.iter().collect();
        self.embed_refs(&refs)
    }

    pub fn embed_refs(&self, input: &[&Datum]) -> Result<FeatureVector> {
        let sparse = self.embed_sparse(input)?;
        Ok(FeatureVector::new(sparse.to_dense(self.output_dim()), self.space.clone()))
    }

    pub fn embed_one(&self, x: &Datum) -> Result<FeatureVector> {
        self.embed_refs(&[x])
    }

    /// Every feature vector of a finite-alphabet map, indexed by the
    /// mixed-radix code of the element sequence. `None` for continuous maps.
    pub fn enumerate_inputs(&self) -> Option<Vec<Vec<Datum>>> {
        let alphabet = self.alphabet()? as u32;
        let n = self.arity.len();
        let total = (alphabet as usize).checked_pow(n as u32)?;
        Some(
            (0..total)
                .map(|mut code| {
                    let mut seq = vec![Datum::Symbol(0); n];
                    for slot in (0..n).rev() {
                        seq[slot] = Datum::Symbol((code % alphabet as usize) as u32);
                        code /= alphabet as usize;
                    }
                    seq
                })
                .collect(),
        )
    }
}

/// A feature vector tagged with the space it lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub space: SpaceId,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, space: SpaceId) -> Self {
        FeatureVector { values, space }
    }

    pub fn zeros(dim: usize, space: SpaceId) -> Self {
        FeatureVector::new(vec![0.0; dim], space)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &FeatureVector) -> Result<f64> {
        self.space.ensure(&other.space)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn add(&self, other: &FeatureVector) -> Result<FeatureVector> {
        self.space.ensure(&other.space)?;
        Ok(FeatureVector::new(
            self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
            self.space.clone(),
        ))
    }

    pub fn scale(&self, s: f64) -> FeatureVector {
        FeatureVector::new(self.values.iter().map(|v| v * s).collect(), self.space.clone())
    }

    pub fn sparse(&self) -> SparseVec {
        SparseVec::from_dense(&self.values)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Kronecker product `a ⊗ b`; index of `(i, j)` is `i·len(b) + j`.
pub fn tensor_feature(a: &FeatureVector, b: &FeatureVector) -> FeatureVector {
    let mut values = Vec::with_capacity(a.len() * b.len());
    for x in &a.values {
        for y in &b.values {
            values.push(x * y);
        }
    }
    FeatureVector::new(values, a.space.tensor(&b.space))
}

/// Pairwise feature inner products `Φᵀ Φ`.
pub fn gram_matrix(map: &FeatureMap, inputs: &[Vec<Datum>]) -> Result<DMatrix<f64>> {
    if inputs.is_empty() {
        return Err(Error::Empty("gram matrix needs at least one input"));
    }
    let feats: Vec<FeatureVector> = inputs.iter().map(|x| map.embed(x)).collect::<Result<_>>()?;
    let n = feats.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = feats[i].dot(&feats[j])?;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Median pairwise Euclidean distance over a subsample of at most 256 points.
pub fn median_bandwidth(points: &[Vec<f64>], seed: u64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Empty("median heuristic needs at least two points"));
    }
    let mut idx: Vec<usize> = (0..points.len()).collect();
    if idx.len() > 256 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        idx.truncate(256);
    }
    let mut d = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (k, &i) in idx.iter().enumerate() {
        for &j in &idx[k + 1..] {
            let s: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.push(s.sqrt());
        }
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let m = d[d.len() / 2];
    if m > 0.0 {
        Ok(m)
    } else {
        Err(Error::InvalidKernel("median pairwise distance is zero".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn one_hot(alphabet: usize, arity: Arity) -> FeatureMap {
        make_feature_map("x", KernelSpec::OneHot { alphabet }, arity, Composition::Tensor).unwrap()
    }

    fn rbf(features: usize, seed: u64) -> FeatureMap {
        make_feature_map(
            "x",
            KernelSpec::RadialBasis {
                input_dim: 2,
                bandwidth: 1.0,
                features,
                seed,
            },
            Arity::Single,
            Composition::Tensor,
        )
        .unwrap()
    }

    #[test]
    fn one_hot_symbols() {
        let m = one_hot(4, Arity::Single);
        assert_eq!(m.embed_one(&Datum::Symbol(1)).unwrap().values, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.embed_one(&Datum::Symbol(3)).unwrap().values, vec![0.0, 0.0, 0.0, 1.0]);
        assert!(m.embed_one(&Datum::Symbol(4)).is_err());
    }

    #[test]
    fn one_hot_block_is_kronecker_index() {
        let m = one_hot(4, Arity::Block(2));
        let v = m.embed(&[Datum::Symbol(1), Datum::Symbol(0)]).unwrap();
        assert_eq!(v.len(), 16);
        let ones: Vec<usize> = (0..16).filter(|&i| v.values[i] == 1.0).collect();
        assert_eq!(ones, vec![4]);
        assert_eq!(v.values.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn linear_features_are_identity() {
        let m = make_feature_map(
            "x",
            KernelSpec::Linear {
                input_dim: 2,
                affine: false,
            },
            Arity::Single,
            Composition::Tensor,
        )
        .unwrap();
        assert_eq!(m.embed_one(&Datum::Vector(vec![0.5, -1.0])).unwrap().values, vec![0.5, -1.0]);
    }

    #[test]
    fn affine_concat_has_single_bias() {
        let m = make_feature_map(
            "h",
            KernelSpec::Linear {
                input_dim: 2,
                affine: true,
            },
            Arity::Suffix(2),
            Composition::Concat,
        )
        .unwrap();
        assert_eq!(m.output_dim(), 5);
        let v = m
            .embed(&[Datum::Sentinel, Datum::Vector(vec![2.0, 3.0])])
            .unwrap();
        assert_eq!(v.values, vec![1.0, 0.0, 0.0, 2.0, 3.0]);
    }

    #[test]
    fn sentinel_only_on_history_maps() {
        let m = one_hot(3, Arity::Suffix(2));
        assert_eq!(m.output_dim(), 16);
        let v = m.embed(&[Datum::Sentinel, Datum::Symbol(2)]).unwrap();
        assert_eq!(v.values[3 * 4 + 2], 1.0);
        assert!(one_hot(3, Arity::Block(2))
            .embed(&[Datum::Sentinel, Datum::Symbol(2)])
            .is_err());
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let m = one_hot(3, Arity::Block(2));
        assert!(matches!(m.embed(&[Datum::Symbol(0)]), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(make_feature_map("x", KernelSpec::OneHot { alphabet: 0 }, Arity::Single, Composition::Tensor).is_err());
        let bad = KernelSpec::RadialBasis {
            input_dim: 1,
            bandwidth: 0.0,
            features: 8,
            seed: 0,
        };
        assert!(matches!(
            make_feature_map("x", bad, Arity::Single, Composition::Tensor),
            Err(Error::InvalidKernel(_))
        ));
        let unknown: std::result::Result<KernelSpec, _> = serde_json::from_str(r#"{"kind":"polynomial"}"#);
        assert!(unknown.is_err());
    }

    #[test]
    fn radial_basis_is_deterministic_and_seeded() {
        let x = Datum::Vector(vec![0.3, -0.7]);
        let a = rbf(64, 9).embed_one(&x).unwrap();
        let b = rbf(64, 9).embed_one(&x).unwrap();
        assert_eq!(a, b);
        let c = rbf(64, 10).embed_one(&x).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn random_features_approximate_the_gaussian_kernel() {
        let map = rbf(2048, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let exact = map
                .spec()
                .evaluate(&Datum::Vector(x.clone()), &Datum::Vector(y.clone()))
                .unwrap();
            let approx = map
                .embed_one(&Datum::Vector(x))
                .unwrap()
                .dot(&map.embed_one(&Datum::Vector(y)).unwrap())
                .unwrap();
            assert!((exact - approx).abs() < 0.05, "exact {exact} approx {approx}");
        }
    }

    #[test]
    fn random_feature_norm_is_bounded() {
        let map = rbf(256, 1);
        for k in 0..50 {
            let x = Datum::Vector(vec![k as f64 * 13.7, -(k as f64) * 0.01]);
            assert!((map.embed_one(&x).unwrap().norm() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gram_examples() {
        let m = rbf(128, 0);
        let g = gram_matrix(&m, &[vec![Datum::Vector(vec![0.1, 0.2])]]).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert!((g[(0, 0)] - 1.0).abs() < 1e-12);
        let exact = m.spec().evaluate(&Datum::Vector(vec![0.1, 0.2]), &Datum::Vector(vec![0.1, 0.2])).unwrap();
        assert_eq!(exact, 1.0);

        let oh = one_hot(3, Arity::Single);
        let inputs: Vec<Vec<Datum>> = (0..3).map(|s| vec![Datum::Symbol(s)]).collect();
        assert_eq!(gram_matrix(&oh, &inputs).unwrap(), DMatrix::identity(3, 3));
        assert!(gram_matrix(&oh, &[]).is_err());
    }

    #[test]
    fn gram_is_psd_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs: Vec<Vec<Datum>> = (0..50)
            .map(|_| vec![Datum::Vector(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])])
            .collect();
        let g = gram_matrix(&rbf(512, 2), &inputs).unwrap();
        assert!((&g - g.transpose()).abs().max() < 1e-12);
        assert!(crate::linalg::min_eigenvalue(&g) >= -1e-10);
    }

    #[test]
    fn median_heuristic() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        // distances 1, 3, 2 -> median 2
        assert_eq!(median_bandwidth(&pts, 0).unwrap(), 2.0);
    }

    #[test]
    fn tensor_examples() {
        let s = SpaceId::new("s");
        let a = FeatureVector::new(vec![1.0, 0.0], s.clone());
        let b = FeatureVector::new(vec![0.0, 1.0], s.clone());
        assert_eq!(tensor_feature(&a, &b).values, vec![0.0, 1.0, 0.0, 0.0]);
        let z = FeatureVector::zeros(2, s);
        assert!(tensor_feature(&a, &z).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn space_mismatch_is_an_error() {
        let a = FeatureVector::new(vec![1.0], SpaceId::new("a"));
        let b = FeatureVector::new(vec![1.0], SpaceId::new("b"));
        assert!(matches!(a.dot(&b), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn serialized_map_round_trips() {
        let m = rbf(16, 4);
        let text = serde_json::to_string(&m).unwrap();
        let back: FeatureMap = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
        let x = Datum::Vector(vec![0.25, 0.5]);
        assert_eq!(m.embed_one(&x).unwrap(), back.embed_one(&x).unwrap());
    }

    fn small_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, 1..5)
    }

    proptest! {
        #[test]
        fn tensor_inner_product_factorizes(a in small_vec(), b in small_vec(), c in small_vec(), d in small_vec()) {
            let n1 = a.len().min(c.len());
            let n2 = b.len().min(d.len());
            let s1 = SpaceId::new("p");
            let s2 = SpaceId::new("q");
            let fa = FeatureVector::new(a[..n1].to_vec(), s1.clone());
            let fc = FeatureVector::new(c[..n1].to_vec(), s1);
            let fb = FeatureVector::new(b[..n2].to_vec(), s2.clone());
            let fd = FeatureVector::new(d[..n2].to_vec(), s2);
            let lhs = tensor_feature(&fa, &fb).dot(&tensor_feature(&fc, &fd)).unwrap();
            let rhs = fa.dot(&fc).unwrap() * fb.dot(&fd).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }

        #[test]
        fn tensor_is_bilinear(a in small_vec(), b in small_vec(), s in -4.0f64..4.0) {
            let fa = FeatureVector::new(a, SpaceId::new("p"));
            let fb = FeatureVector::new(b, SpaceId::new("q"));
            let lhs = tensor_feature(&fa.scale(s), &fb);
            let rhs = tensor_feature(&fa, &fb).scale(s);
            for (x, y) in lhs.values.iter().zip(&rhs.values) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn one_hot_blocks_use_mixed_radix_index(syms in prop::collection::vec(0u32..3, 1..4)) {
            let m = one_hot(3, Arity::Block(syms.len()));
            let input: Vec<Datum> = syms.iter().map(|&s| Datum::Symbol(s)).collect();
            let v = m.embed(&input).unwrap();
            let code = syms.iter().fold(0usize, |acc, &s| acc * 3 + s as usize);
            prop_assert_eq!(v.values.iter().filter(|&&x| x != 0.0).count(), 1);
            prop_assert_eq!(v.values[code], 1.0);
            prop_assert_eq!(&m.embed(&input).unwrap(), &v);
        }

        #[test]
        fn gram_is_symmetric_psd(points in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..40)) {
            let inputs: Vec<Vec<Datum>> = points.iter().map(|&(x, y)| vec![Datum::Vector(vec![x, y])]).collect();
            for map in [rbf(64, 8), make_feature_map("x", KernelSpec::Linear { input_dim: 2, affine: true }, Arity::Single, Composition::Tensor).unwrap()] {
                let g = gram_matrix(&map, &inputs).unwrap();
                prop_assert!((&g - g.transpose()).abs().max() <= 1e-12);
                prop_assert!(crate::linalg::min_eigenvalue(&g) >= -1e-10 * (1.0 + g.abs().max()));
            }
        }
    }
}
