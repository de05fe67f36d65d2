//! Column-sparse feature matrices and the ridge solves every estimator uses.
//!
//! One-hot and tensor-of-one-hot features have a single nonzero per column, so
//! second-moment matrices built from them are block diagonal (often exactly
//! diagonal). [`ridge_solve`] exploits that by factoring each connected block
//! of the sparsity pattern separately. Dense features collapse to one block.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{FeatureVector, SpaceId};

/// Columns per accumulation chunk. Fixed so that results never depend on the
/// number of worker threads.
const CHUNK_COLUMNS: usize = 4096;

/// Sparse vector with sorted, unique indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn from_dense(values: &[f64]) -> Self {
        let mut out = SparseVec::default();
        for (i, &v) in values.iter().enumerate() {
            if v != 0.0 {
                out.indices.push(i as u32);
                out.values.push(v);
            }
        }
        out
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        out
    }

    /// Kronecker product; `b_dim` is the dense length of `b`.
    pub fn kron(&self, b: &SparseVec, b_dim: usize) -> SparseVec {
        let mut out = SparseVec {
            indices: Vec::with_capacity(self.indices.len() * b.indices.len()),
            values: Vec::with_capacity(self.indices.len() * b.indices.len()),
        };
        for (&i, &x) in self.indices.iter().zip(&self.values) {
            for (&j, &y) in b.indices.iter().zip(&b.values) {
                let v = x * y;
                if v != 0.0 {
                    out.indices.push((i as usize * b_dim + j as usize) as u32);
                    out.values.push(v);
                }
            }
        }
        out
    }

    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| v * dense[i as usize])
            .sum()
    }
}

/// Feature matrix stored column-compressed: one column per sample.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    dim: usize,
    space: SpaceId,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, space: SpaceId) -> Self {
        FeatureMatrix {
            dim,
            space,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ncols(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn space(&self) -> &SpaceId {
        &self.space
    }

    pub fn push(&mut self, col: &SparseVec) {
        debug_assert!(col.indices.iter().all(|&i| (i as usize) < self.dim));
        self.indices.extend_from_slice(&col.indices);
        self.values.extend_from_slice(&col.values);
        self.indptr.push(self.indices.len());
    }

    pub fn push_dense(&mut self, col: &[f64]) {
        debug_assert_eq!(col.len(), self.dim);
        self.push(&SparseVec::from_dense(col));
    }

    pub fn column(&self, j: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[j], self.indptr[j + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn column_sparse(&self, j: usize) -> SparseVec {
        let (i, v) = self.column(j);
        SparseVec {
            indices: i.to_vec(),
            values: v.to_vec(),
        }
    }

    pub fn column_vector(&self, j: usize) -> FeatureVector {
        FeatureVector::new(self.column_sparse(j).to_dense(self.dim), self.space.clone())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.ncols());
        for j in 0..self.ncols() {
            let (idx, val) = self.column(j);
            for (&i, &v) in idx.iter().zip(val) {
                out[(i as usize, j)] = v;
            }
        }
        out
    }

    pub fn from_dense(m: &DMatrix<f64>, space: SpaceId) -> Self {
        let mut out = FeatureMatrix::new(m.nrows(), space);
        for j in 0..m.ncols() {
            out.push_dense(m.column(j).as_slice());
        }
        out
    }

    /// Column-wise Kronecker (Khatri–Rao) product.
    pub fn khatri_rao(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.ncols() != other.ncols() {
            return Err(Error::Shape(format!(
                "column counts differ: {} vs {}",
                self.ncols(),
                other.ncols()
            )));
        }
        let mut out = FeatureMatrix::new(self.dim * other.dim, self.space.tensor(&other.space));
        for j in 0..self.ncols() {
            let kron = self.column_sparse(j).kron(&other.column_sparse(j), other.dim);
            out.push(&kron);
        }
        Ok(out)
    }

    /// Keeps the columns listed in `cols`, in that order.
    pub fn select(&self, cols: &[usize]) -> FeatureMatrix {
        let mut out = FeatureMatrix::new(self.dim, self.space.clone());
        for &j in cols {
            out.push(&self.column_sparse(j));
        }
        out
    }

    /// Average nonzeros per column relative to `dim`.
    pub fn density(&self) -> f64 {
        if self.ncols() == 0 || self.dim == 0 {
            return 0.0;
        }
        self.indices.len() as f64 / (self.ncols() * self.dim) as f64
    }

    /// `self · diag(weights) · otherᵀ`, unnormalized.
    pub fn weighted_cross(&self, other: &FeatureMatrix, weights: Option<&[f64]>) -> Result<DMatrix<f64>> {
        if self.ncols() != other.ncols() {
            return Err(Error::Shape(format!(
                "column counts differ: {} vs {}",
                self.ncols(),
                other.ncols()
            )));
        }
        if let Some(w) = weights {
            if w.len() != self.ncols() {
                return Err(Error::Shape(format!(
                    "{} weights for {} columns",
                    w.len(),
                    self.ncols()
                )));
            }
        }
        let n = self.ncols();
        let (rows, cols) = (self.dim, other.dim);
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(CHUNK_COLUMNS)
            .map(|s| (s, (s + CHUNK_COLUMNS).min(n)))
            .collect();
        let partials: Vec<DMatrix<f64>> = chunks
            .par_iter()
            .map(|&(start, end)| {
                let mut acc = DMatrix::zeros(rows, cols);
                for j in start..end {
                    let w = weights.map_or(1.0, |w| w[j]);
                    if w == 0.0 {
                        continue;
                    }
                    let (xi, xv) = self.column(j);
                    let (yi, yv) = other.column(j);
                    for (&r, &a) in xi.iter().zip(xv) {
                        let a = a * w;
                        for (&c, &b) in yi.iter().zip(yv) {
                            acc[(r as usize, c as usize)] += a * b;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = DMatrix::zeros(rows, cols);
        for p in partials {
            total += p;
        }
        Ok(total)
    }

    /// `self · v` for a dense vector with one entry per column.
    pub fn mul_vec(&self, v: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for j in 0..self.ncols() {
            if v[j] == 0.0 {
                continue;
            }
            let (idx, val) = self.column(j);
            for (&i, &x) in idx.iter().zip(val) {
                out[i as usize] += x * v[j];
            }
        }
        out
    }

    /// `selfᵀ · v`, one entry per column.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.ncols())
            .map(|j| {
                let (idx, val) = self.column(j);
                idx.iter().zip(val).map(|(&i, &x)| x * v[i as usize]).sum()
            })
            .collect()
    }

    pub fn mean_column(&self) -> Vec<f64> {
        let n = self.ncols().max(1) as f64;
        let mut out = vec![0.0; self.dim];
        for j in 0..self.ncols() {
            let (idx, val) = self.column(j);
            for (&i, &x) in idx.iter().zip(val) {
                out[i as usize] += x;
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Connected components of the nonzero pattern of a symmetric matrix.
fn components(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for c in 0..n {
        for r in (c + 1)..n {
            if m[(r, c)] != 0.0 || m[(c, r)] != 0.0 {
                let (a, b) = (find(&mut parent, r), find(&mut parent, c));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

fn solve_failure(g: &DMatrix<f64>, ridge: f64) -> Error {
    let diag = g.diagonal();
    Error::Solve {
        dim: g.nrows(),
        min_diag: diag.min(),
        max_diag: diag.max(),
        ridge,
    }
}

/// Solves `(g + ridge·I) x = rhs` for symmetric `g`.
///
/// Each block of the sparsity pattern is factored by Cholesky; when `allow_lu`
/// is set an indefinite block falls back to LU instead of failing.
pub fn ridge_solve(g: &DMatrix<f64>, rhs: &DMatrix<f64>, ridge: f64, allow_lu: bool) -> Result<DMatrix<f64>> {
    if !(ridge > 0.0) {
        return Err(Error::NonPositiveRidge(ridge));
    }
    let n = g.nrows();
    if g.ncols() != n || rhs.nrows() != n {
        return Err(Error::Shape(format!(
            "system {}x{} with rhs {}x{}",
            g.nrows(),
            g.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    let mut out = DMatrix::zeros(n, rhs.ncols());
    for comp in components(g) {
        if comp.len() == 1 {
            let i = comp[0];
            let d = g[(i, i)] + ridge;
            if d == 0.0 || !d.is_finite() || (!allow_lu && d < 0.0) {
                return Err(solve_failure(g, ridge));
            }
            for c in 0..rhs.ncols() {
                out[(i, c)] = rhs[(i, c)] / d;
            }
            continue;
        }
        let k = comp.len();
        let mut sub = DMatrix::from_fn(k, k, |r, c| g[(comp[r], comp[c])]);
        for i in 0..k {
            sub[(i, i)] += ridge;
        }
        let sub_rhs = DMatrix::from_fn(k, rhs.ncols(), |r, c| rhs[(comp[r], c)]);
        let sol = match sub.clone().cholesky() {
            Some(ch) => ch.solve(&sub_rhs),
            None if allow_lu => sub
                .lu()
                .solve(&sub_rhs)
                .ok_or_else(|| solve_failure(g, ridge))?,
            None => return Err(solve_failure(g, ridge)),
        };
        for (r, &i) in comp.iter().enumerate() {
            for c in 0..rhs.ncols() {
                out[(i, c)] = sol[(r, c)];
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(solve_failure(g, ridge));
    }
    Ok(out)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_of_one_hots_is_one_hot() {
        let a = SparseVec::from_dense(&[0.0, 1.0]);
        let b = SparseVec::from_dense(&[0.0, 0.0, 1.0]);
        let k = a.kron(&b, 3);
        assert_eq!(k.to_dense(6), vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn block_solve_matches_dense_solve() {
        // two independent 2x2 blocks interleaved
        let g = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, 0.0, 0.5, 0.0, //
                0.0, 3.0, 0.0, 1.0, //
                0.5, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 4.0,
            ],
        );
        let rhs = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 2.0, 1.0, -1.0, 3.0, 0.5, 0.5]);
        let fast = ridge_solve(&g, &rhs, 0.1, false).unwrap();
        let dense = (g + DMatrix::identity(4, 4) * 0.1).lu().solve(&rhs).unwrap();
        assert!((fast - dense).abs().max() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_ridge() {
        let g = DMatrix::identity(2, 2);
        assert!(matches!(
            ridge_solve(&g, &g, 0.0, false),
            Err(Error::NonPositiveRidge(_))
        ));
    }

    #[test]
    fn weighted_cross_is_independent_of_chunking() {
        let space = SpaceId::new("x");
        let mut x = FeatureMatrix::new(3, space.clone());
        for j in 0..(CHUNK_COLUMNS * 2 + 17) {
            let mut v = vec![0.0; 3];
            v[j % 3] = 1.0 + (j as f64).sin();
            x.push_dense(&v);
        }
        let c = x.weighted_cross(&x, None).unwrap();
        let dense = x.to_dense();
        let direct = &dense * dense.transpose();
        assert!((c - direct).abs().max() < 1e-8);
    }
}
