//! Dense symmetric eigensolvers and subspace utilities.
//!
//! Everything here works on small dense matrices (p up to a few hundred) and is
//! deterministic: eigenpairs come back sorted by descending eigenvalue and every
//! eigenvector or basis column is sign-normalized so that its first component
//! with magnitude above [`SIGN_EPS`] is positive.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfpError};

/// Default relative ridge for covariance inversions (scaled by `tr(Σ)/p`).
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Components at or below this magnitude are skipped when fixing signs.
pub const SIGN_EPS: f64 = 1e-12;

/// Residual norm (relative to the largest input column) below which a column
/// is treated as linearly dependent.
pub const RANK_TOL: f64 = 1e-10;

/// A finite, exactly symmetric square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Symmetrizes `m` as `(m + mᵀ)/2`. Rejects non-square or non-finite input.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(SfpError::Input(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(SfpError::Input("matrix has non-finite entries".into()));
        }
        Ok(Self(symmetrize(&m)))
    }

    pub fn identity(p: usize) -> Self {
        Self(DMatrix::identity(p, p))
    }

    pub fn zeros(p: usize) -> Self {
        Self(DMatrix::zeros(p, p))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Largest absolute eigenvalue.
    pub fn spectral_norm(&self) -> f64 {
        sym_eig(self)
            .values()
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// A `p × k` matrix with orthonormal columns in canonical sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthonormalBasis {
    columns: DMatrix<f64>,
}

impl OrthonormalBasis {
    /// The rank-zero basis in ambient dimension `p`.
    pub fn empty(p: usize) -> Self {
        Self {
            columns: DMatrix::zeros(p, 0),
        }
    }

    /// Canonical basis vectors `e_i` for the given indices.
    pub fn coordinate(p: usize, indices: &[usize]) -> Self {
        let mut cols = DMatrix::zeros(p, indices.len());
        for (j, &i) in indices.iter().enumerate() {
            cols[(i, j)] = 1.0;
        }
        Self { columns: cols }
    }

    /// Wraps columns the caller knows to be orthonormal, fixing signs only.
    pub(crate) fn from_orthonormal(mut columns: DMatrix<f64>) -> Self {
        fix_signs(&mut columns);
        Self { columns }
    }

    /// Validates orthonormality within `1e-8` before wrapping.
    pub fn try_from_columns(columns: DMatrix<f64>) -> Result<Self> {
        let k = columns.ncols();
        let gram = columns.transpose() * &columns;
        let err = (gram - DMatrix::<f64>::identity(k, k)).amax();
        if err > 1e-8 {
            return Err(SfpError::Input(format!(
                "columns are not orthonormal (max Gram error {err:e})"
            )));
        }
        Ok(Self::from_orthonormal(columns))
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank(&self) -> usize {
        self.columns.ncols()
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn into_columns(self) -> DMatrix<f64> {
        self.columns
    }

    /// The first `k` columns (clamped to the available rank).
    pub fn leading(&self, k: usize) -> Self {
        let k = k.min(self.rank());
        Self {
            columns: self.columns.columns(0, k).into_owned(),
        }
    }

    /// Concatenates two bases and re-orthonormalizes the result in order.
    pub fn concat(&self, other: &Self) -> Self {
        assert_eq!(self.dim(), other.dim(), "ambient dimensions differ");
        let mut cols = DMatrix::zeros(self.dim(), self.rank() + other.rank());
        cols.columns_mut(0, self.rank()).copy_from(&self.columns);
        cols.columns_mut(self.rank(), other.rank())
            .copy_from(&other.columns);
        orthonormalize_ordered(&cols)
    }
}

/// Eigenvalues sorted non-increasing with matching eigenvectors.
///
/// For the generalized problem the vectors are `Σ`-orthonormal rather than
/// Euclidean-orthonormal; use [`EigenPairs::leading_basis`] to get an
/// orthonormal basis of a leading span.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

impl EigenPairs {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i).into_owned()
    }

    /// Euclidean orthonormal basis for the span of the top `k` vectors, with
    /// column `j` spanning the same flag as the first `j+1` eigenvectors.
    pub fn leading_basis(&self, k: usize) -> OrthonormalBasis {
        let k = k.min(self.vectors.ncols());
        orthonormalize_ordered(&self.vectors.columns(0, k).into_owned())
    }

    /// Number of eigenvalues above `tol` times the largest absolute value.
    pub fn positive_count(&self, tol: f64) -> usize {
        let scale = self.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if scale == 0.0 {
            return 0;
        }
        self.values.iter().filter(|&&v| v > tol * scale).count()
    }
}

/// `(m + mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn fix_signs(cols: &mut DMatrix<f64>) {
    for mut col in cols.column_iter_mut() {
        if let Some(first) = col.iter().find(|v| v.abs() > SIGN_EPS) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Full symmetric eigendecomposition, descending order, canonical signs.
pub fn sym_eig(m: &SymMatrix) -> EigenPairs {
    let p = m.dim();
    if p == 0 {
        return EigenPairs {
            values: Vec::new(),
            vectors: DMatrix::zeros(0, 0),
        };
    }
    let eig = SymmetricEigen::new(m.matrix().clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(p, p);
    for (j, &i) in order.iter().enumerate() {
        vectors.set_column(j, &eig.eigenvectors.column(i));
    }
    fix_signs(&mut vectors);
    EigenPairs { values, vectors }
}

fn shifted_spectrum(sigma: &SymMatrix, ridge: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !(ridge >= 0.0) {
        return Err(SfpError::Input(format!("ridge must be >= 0, got {ridge}")));
    }
    let p = sigma.dim();
    let eig = sym_eig(sigma);
    let norm = eig.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if let Some(&min) = eig.values.last() {
        if min < -1e-8 * norm {
            return Err(SfpError::Input(format!(
                "matrix is not positive semi-definite (eigenvalue {min:e}, norm {norm:e})"
            )));
        }
    }
    let shift = if p > 0 { ridge * sigma.trace() / p as f64 } else { 0.0 };
    let vals: Vec<f64> = eig.values.iter().map(|v| v.max(0.0) + shift).collect();
    let max = vals.first().copied().unwrap_or(0.0);
    let min = vals.last().copied().unwrap_or(0.0);
    if p > 0 && (max <= 0.0 || min <= 1e-12 * max) {
        return Err(SfpError::Conditioning(format!(
            "matrix is numerically singular (eigenvalues {max:e} .. {min:e}, ridge {ridge:e})"
        )));
    }
    Ok((vals, eig.vectors))
}

/// `(Σ + ridge·(tr Σ / p)·I)^{-1/2}` through the eigendecomposition of `Σ`.
pub fn inv_sqrt(sigma: &SymMatrix, ridge: f64) -> Result<SymMatrix> {
    let (vals, vecs) = shifted_spectrum(sigma, ridge)?;
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| {
        vecs[(i, j)] / vals[j].sqrt()
    });
    SymMatrix::new(&scaled * vecs.transpose())
}

/// `(Σ + ridge·(tr Σ / p)·I)^{1/2}`.
pub fn sqrt_psd(sigma: &SymMatrix, ridge: f64) -> Result<SymMatrix> {
    let (vals, vecs) = shifted_spectrum(sigma, ridge)?;
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| {
        vecs[(i, j)] * vals[j].sqrt()
    });
    SymMatrix::new(&scaled * vecs.transpose())
}

/// Solves `M ν = λ Σ ν` by whitening with `W = (Σ + ridge)^{-1/2}`: the
/// eigenvectors `u` of `W M W` map back to `ν = W u`, which are orthonormal in
/// the (ridged) `Σ` inner product.
pub fn gen_eig(m: &SymMatrix, sigma: &SymMatrix, ridge: f64) -> Result<EigenPairs> {
    if m.dim() != sigma.dim() {
        return Err(SfpError::Dimension(format!(
            "gen_eig: M is {}x{}, Σ is {}x{}",
            m.dim(),
            m.dim(),
            sigma.dim(),
            sigma.dim()
        )));
    }
    let w = inv_sqrt(sigma, ridge)?;
    let whitened = SymMatrix::new(w.matrix() * m.matrix() * w.matrix())?;
    let eig = sym_eig(&whitened);
    let mut vectors = w.matrix() * eig.vectors;
    fix_signs(&mut vectors);
    Ok(EigenPairs {
        values: eig.values,
        vectors,
    })
}

/// Orthogonal projector `B Bᵀ` onto the span of `b`.
pub fn projection(b: &OrthonormalBasis) -> SymMatrix {
    SymMatrix(symmetrize(&(b.columns() * b.columns().transpose())))
}

/// `‖P₁ − P₂‖_F / √2`: zero iff the spans coincide, one for orthogonal lines.
pub fn subspace_distance(a: &OrthonormalBasis, b: &OrthonormalBasis) -> f64 {
    assert_eq!(a.dim(), b.dim(), "ambient dimensions differ");
    let diff = projection(a).into_inner() - projection(b).into_inner();
    diff.norm() / std::f64::consts::SQRT_2
}

fn max_column_norm(v: &DMatrix<f64>) -> f64 {
    v.column_iter().fold(0.0_f64, |a, c| a.max(c.norm()))
}

/// Orthonormal basis of `span(v)` by modified Gram–Schmidt with column
/// pivoting (largest remaining residual first). Columns whose residual drops
/// below [`RANK_TOL`] times the largest input norm are discarded.
pub fn orthonormalize(v: &DMatrix<f64>) -> OrthonormalBasis {
    let p = v.nrows();
    let scale = max_column_norm(v);
    if scale == 0.0 || v.ncols() == 0 {
        return OrthonormalBasis::empty(p);
    }
    let tol = RANK_TOL * scale;
    let mut work: Vec<DVector<f64>> = v.column_iter().map(|c| c.into_owned()).collect();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    while !work.is_empty() {
        let (best, norm) = work
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.norm()))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if norm < tol {
            break;
        }
        let mut q = work.swap_remove(best);
        // second pass guards against loss of orthogonality
        for b in &basis {
            let c = b.dot(&q);
            q.axpy(-c, b, 1.0);
        }
        let qn = q.norm();
        if qn < tol {
            continue;
        }
        q /= qn;
        for c in work.iter_mut() {
            let d = q.dot(c);
            c.axpy(-d, &q, 1.0);
        }
        basis.push(q);
    }
    basis_from_vecs(p, basis)
}

/// Gram–Schmidt in the given column order, dropping dependent columns.
/// The span of the first `j` output columns equals the span of the first
/// retained input columns, so ordering information is preserved.
pub fn orthonormalize_ordered(v: &DMatrix<f64>) -> OrthonormalBasis {
    let p = v.nrows();
    let scale = max_column_norm(v);
    if scale == 0.0 || v.ncols() == 0 {
        return OrthonormalBasis::empty(p);
    }
    let tol = RANK_TOL * scale;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for col in v.column_iter() {
        let mut q = col.into_owned();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&q);
                q.axpy(-c, b, 1.0);
            }
        }
        let qn = q.norm();
        if qn >= tol {
            basis.push(q / qn);
        }
    }
    basis_from_vecs(p, basis)
}

fn basis_from_vecs(p: usize, basis: Vec<DVector<f64>>) -> OrthonormalBasis {
    let mut cols = DMatrix::zeros(p, basis.len());
    for (j, b) in basis.iter().enumerate() {
        cols.set_column(j, b);
    }
    OrthonormalBasis::from_orthonormal(cols)
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix, zeroing eigenvalues
/// below `rel_tol` times the largest absolute eigenvalue.
pub fn pinv_sym(m: &SymMatrix, rel_tol: f64) -> DMatrix<f64> {
    let eig = sym_eig(m);
    let scale = eig.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let p = m.dim();
    let mut out = DMatrix::zeros(p, p);
    if scale == 0.0 {
        return out;
    }
    for (j, &lam) in eig.values.iter().enumerate() {
        if lam.abs() > rel_tol * scale {
            let v = eig.vectors.column(j);
            out += (&v * v.transpose()) / lam;
        }
    }
    out
}

/// Frobenius-relative difference `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}
