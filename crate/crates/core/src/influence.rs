//! Influence functions of the projection family and of the downstream
//! parameters, finite-difference validation and Monte Carlo asymptotics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::synth::{generate, resample, SynthConfig};
use crate::data::Truth;
use crate::decomposition::{estimate_family, DecompositionConfig, FixedRanks, Target};
use crate::error::{Result, SfpError};
use crate::linalg::{orthonormalize, relative_error, projection, sym_eig, symmetrize, EigenPairs, OrthonormalBasis, SymMatrix};
use crate::pipeline::fit_projected;
use crate::predictors::{fit, Model, ModelKind, SoftmaxOptions};
use crate::rng;
use crate::sdr::{slice_response, weighted_candidate, Moments, Response, SdrMethod, SliceAssignment};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Smallest eigenvalue gap accepted by [`eigvec_if`].
pub const GAP_TOL: f64 = 1e-8;
/// Step for derivatives of fitted parameters with respect to the projection.
pub const PROJECTION_STEP: f64 = 1e-4;

/// Weights of `(1 − ε)F_n + ε δ_index`.
pub fn contamination_weights(n: usize, index: usize, eps: f64) -> Vec<f64> {
    let mut w = vec![(1.0 - eps) / n as f64; n];
    w[index] += eps;
    w
}

/// Central Gateaux difference of a weighted functional at sample `index`:
/// `(R(+ε) − R(−ε)) / 2ε`.
pub fn gateaux_fd<F>(functional: F, n: usize, index: usize, eps: f64) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    if !(eps > 0.0) {
        return Err(SfpError::Input("eps must be positive".into()));
    }
    if index >= n {
        return Err(SfpError::Dimension(format!("index {index} out of {n}")));
    }
    let plus = functional(&contamination_weights(n, index, eps))?;
    let minus = functional(&contamination_weights(n, index, -eps))?;
    if plus.len() != minus.len() {
        return Err(SfpError::Dimension("functional changed output size".into()));
    }
    Ok((plus - minus) / (2.0 * eps))
}

/// Matrix-valued [`gateaux_fd`].
pub fn gateaux_fd_matrix<F>(functional: F, n: usize, index: usize, eps: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    let mut shape = (0, 0);
    let shape_ref = std::cell::Cell::new(shape);
    let v = gateaux_fd(
        |w| {
            let m = functional(w)?;
            shape_ref.set(m.shape());
            Ok(DVector::from_column_slice(m.as_slice()))
        },
        n,
        index,
        eps,
    )?;
    shape = shape_ref.get();
    Ok(DMatrix::from_column_slice(shape.0, shape.1, v.as_slice()))
}

/// First-order change of eigenvector `i` of `eig` under a perturbation
/// `m_star`, summed over the leading `k_total` pairs.
pub fn eigvec_if_pairs(eig: &EigenPairs, m_star: &DMatrix<f64>, i: usize, k_total: usize) -> Result<DVector<f64>> {
    let p = eig.len();
    if i >= k_total || k_total > p {
        return Err(SfpError::Dimension(format!("need i < k_total <= {p}, got i = {i}, k_total = {k_total}")));
    }
    let vals = eig.values();
    let mut bad = Vec::new();
    let mut min_gap = f64::INFINITY;
    for j in (0..k_total).filter(|&j| j != i) {
        let g = (vals[i] - vals[j]).abs();
        min_gap = min_gap.min(g);
        if g <= GAP_TOL {
            bad.push((i.min(j), i.max(j)));
        }
    }
    if !bad.is_empty() {
        return Err(SfpError::DegenerateSpectrum { indices: bad, min_gap });
    }
    let phi_i = eig.vector(i);
    let applied = m_star * &phi_i;
    let mut out = DVector::zeros(phi_i.len());
    for j in (0..k_total).filter(|&j| j != i) {
        let phi_j = eig.vector(j);
        out.axpy(phi_j.dot(&applied) / (vals[i] - vals[j]), &phi_j, 1.0);
    }
    Ok(out)
}

/// [`eigvec_if_pairs`] on the decomposition of `m`.
pub fn eigvec_if(m: &SymMatrix, m_star: &DMatrix<f64>, i: usize, k_total: usize) -> Result<DVector<f64>> {
    eigvec_if_pairs(&sym_eig(m), m_star, i, k_total)
}

/// Derivative of the orthogonal projector onto `span(U)` when `U` moves by `u_star`.
pub fn projector_derivative(u: &DMatrix<f64>, u_star: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = u.nrows();
    if u.ncols() == 0 {
        return Ok(DMatrix::zeros(p, p));
    }
    let gram = u.transpose() * u;
    let inv = gram
        .cholesky()
        .ok_or_else(|| SfpError::Conditioning("spanning set is rank deficient".into()))?
        .inverse();
    let pinv = &inv * u.transpose();
    let proj = u * &pinv;
    let left = (DMatrix::identity(p, p) - proj) * u_star * pinv;
    Ok(&left + left.transpose())
}

/// Ranks that define the projection functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionalRanks {
    pub sensitive: usize,
    pub unshared: usize,
    pub shared: usize,
}

/// Candidate matrices and covariance at one weighting.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub m_y: SymMatrix,
    pub m_z: SymMatrix,
    pub sigma: SymMatrix,
}

/// Influence values of the candidates at one sample.
#[derive(Debug, Clone)]
pub struct CandidateInfluence {
    pub m_y: DMatrix<f64>,
    pub m_z: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

/// Spectral pieces of the functional.
#[derive(Debug, Clone)]
pub struct Pieces {
    /// Eigen-decomposition of `M_Z`.
    pub sensitive: EigenPairs,
    /// `I − ΨΨᵀ`.
    pub q_z: DMatrix<f64>,
    /// Eigen-decomposition of `Q_z M_Y Q_z`.
    pub target_resid: EigenPairs,
    /// Eigen-decomposition of `sym(M_Y Σ M_Z)`.
    pub cross: EigenPairs,
}

/// The projection family as a functional of sample weights: `Ψ` from the
/// top eigenvectors of `M_Z`, target directions from `Q_z M_Y Q_z`, shared
/// directions from `sym(M_Y Σ M_Z)`, and `P^(m)` the projector onto the
/// target directions plus the first `m` shared directions. Slices are fixed.
#[derive(Debug, Clone)]
pub struct ProjectionFunctional<'a> {
    pub x: &'a DMatrix<f64>,
    pub y_slices: SliceAssignment,
    pub z_slices: SliceAssignment,
    pub target_method: SdrMethod,
    pub sensitive_method: SdrMethod,
    pub ridge: f64,
    pub ranks: FunctionalRanks,
}

impl<'a> ProjectionFunctional<'a> {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn candidates(&self, w: &[f64]) -> Result<Candidates> {
        let cy = weighted_candidate(self.target_method, self.x, &self.y_slices, w, self.ridge, Moments::Population)?;
        let cz = weighted_candidate(self.sensitive_method, self.x, &self.z_slices, w, self.ridge, Moments::Population)?;
        Ok(Candidates {
            m_y: cy.m,
            m_z: cz.m,
            sigma: cy.sigma,
        })
    }

    pub fn uniform(&self) -> Vec<f64> {
        vec![1.0 / self.n() as f64; self.n()]
    }

    pub fn pieces(&self, c: &Candidates) -> Result<Pieces> {
        let p = self.p();
        let sensitive = sym_eig(&c.m_z);
        let psi = sensitive.vectors().columns(0, self.ranks.sensitive);
        let q_z = DMatrix::identity(p, p) - &psi * psi.transpose();
        let resid = SymMatrix::new(&q_z * c.m_y.matrix() * &q_z)?;
        let cross = SymMatrix::new(symmetrize(&(c.m_y.matrix() * c.sigma.matrix() * c.m_z.matrix())))?;
        Ok(Pieces {
            sensitive,
            q_z,
            target_resid: sym_eig(&resid),
            cross: sym_eig(&cross),
        })
    }

    /// Spanning set `[β_1..β_d, φ_1..φ_m]`.
    pub fn spanning_set(&self, pieces: &Pieces, m: usize) -> DMatrix<f64> {
        let d = self.ranks.unshared;
        let p = self.p();
        let mut u = DMatrix::zeros(p, d + m);
        u.columns_mut(0, d).copy_from(&pieces.target_resid.vectors().columns(0, d));
        u.columns_mut(d, m).copy_from(&pieces.cross.vectors().columns(0, m));
        u
    }

    pub fn projection(&self, c: &Candidates, m: usize) -> Result<SymMatrix> {
        self.check_level(m)?;
        let pieces = self.pieces(c)?;
        Ok(projection(&orthonormalize(&self.spanning_set(&pieces, m))))
    }

    pub fn projection_at(&self, w: &[f64], m: usize) -> Result<SymMatrix> {
        self.projection(&self.candidates(w)?, m)
    }

    fn check_level(&self, m: usize) -> Result<()> {
        if m > self.ranks.shared {
            return Err(SfpError::Dimension(format!("m = {m} exceeds s = {}", self.ranks.shared)));
        }
        Ok(())
    }

    /// Candidate influence at sample `index` by Gateaux differences.
    pub fn candidate_if(&self, index: usize, eps: f64) -> Result<CandidateInfluence> {
        let p = self.p();
        let v = gateaux_fd(
            |w| {
                let c = self.candidates(w)?;
                let mut out = Vec::with_capacity(3 * p * p);
                out.extend_from_slice(c.m_y.matrix().as_slice());
                out.extend_from_slice(c.m_z.matrix().as_slice());
                out.extend_from_slice(c.sigma.matrix().as_slice());
                Ok(DVector::from_vec(out))
            },
            self.n(),
            index,
            eps,
        )?;
        let block = |k: usize| DMatrix::from_column_slice(p, p, &v.as_slice()[k * p * p..(k + 1) * p * p]);
        Ok(CandidateInfluence {
            m_y: block(0),
            m_z: block(1),
            sigma: block(2),
        })
    }

    /// Influence of the leading sensitive, target and shared directions.
    pub fn direction_if(&self, c: &Candidates, pieces: &Pieces, star: &CandidateInfluence, m: usize) -> Result<DirectionInfluence> {
        self.check_level(m)?;
        let p = self.p();
        let mut sensitive = Vec::with_capacity(self.ranks.sensitive);
        let mut q_star = DMatrix::zeros(p, p);
        for j in 0..self.ranks.sensitive {
            let psi = pieces.sensitive.vector(j);
            let ps = eigvec_if_pairs(&pieces.sensitive, &star.m_z, j, p)?;
            q_star -= &ps * psi.transpose() + &psi * ps.transpose();
            sensitive.push(ps);
        }
        let my = c.m_y.matrix();
        let resid_star = &q_star * my * &pieces.q_z + &pieces.q_z * &star.m_y * &pieces.q_z + &pieces.q_z * my * &q_star;
        let cross_star = symmetrize(&lemma_product(c, star));
        let target = (0..self.ranks.unshared)
            .map(|k| eigvec_if_pairs(&pieces.target_resid, &resid_star, k, p))
            .collect::<Result<Vec<_>>>()?;
        let shared = (0..m)
            .map(|i| eigvec_if_pairs(&pieces.cross, &cross_star, i, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(DirectionInfluence { sensitive, target, shared })
    }

    /// Influence of `P^(m)` assembled from the direction influences.
    pub fn projection_if(&self, c: &Candidates, pieces: &Pieces, star: &CandidateInfluence, m: usize) -> Result<DMatrix<f64>> {
        let dirs = self.direction_if(c, pieces, star, m)?;
        let u = self.spanning_set(pieces, m);
        let mut u_star = DMatrix::zeros(self.p(), u.ncols());
        for (k, v) in dirs.target.iter().chain(&dirs.shared).enumerate() {
            u_star.column_mut(k).copy_from(v);
        }
        projector_derivative(&u, &u_star)
    }
}

/// Per-sample influence of the leading eigenvectors of each piece.
#[derive(Debug, Clone)]
pub struct DirectionInfluence {
    pub sensitive: Vec<DVector<f64>>,
    pub target: Vec<DVector<f64>>,
    pub shared: Vec<DVector<f64>>,
}

/// `M_Y* Σ M_Z + M_Y Σ* M_Z + M_Y Σ M_Z*`.
pub fn lemma_product(c: &Candidates, star: &CandidateInfluence) -> DMatrix<f64> {
    let (my, s, mz) = (c.m_y.matrix(), c.sigma.matrix(), c.m_z.matrix());
    &star.m_y * s * mz + my * &star.sigma * mz + my * s * &star.m_z
}

/// Per-sample influence of the fitted coefficients (`p × K`, flattened
/// column-major, intercepts excluded).
#[derive(Debug, Clone)]
pub struct ThetaInfluence {
    /// `n × pK`: fixed-projection term plus projection term.
    pub values: DMatrix<f64>,
    pub fixed_projection: DMatrix<f64>,
    pub projection_term: DMatrix<f64>,
    /// Fitted coefficients, flattened.
    pub theta: DVector<f64>,
}

fn flat_coefficients(model: &Model) -> DVector<f64> {
    let c = model.coefficients();
    DVector::from_column_slice(c.as_slice())
}

fn retract(p_mat: &DMatrix<f64>, rank: usize) -> Result<OrthonormalBasis> {
    let eig = sym_eig(&SymMatrix::new(p_mat.clone())?);
    Ok(eig.leading_basis(rank))
}

/// Influence of the coefficients fitted on `x` projected onto `span(basis)`:
/// `−H⁻¹G` with the projection held fixed, plus `D·vec(P*)` where `D` is the
/// derivative of the refitted coefficients along the tangent directions of
/// the projection manifold (central differences with retraction to rank `k`).
pub fn theta_if(
    kind: ModelKind,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    basis: &OrthonormalBasis,
    p_stars: Option<&[DMatrix<f64>]>,
    opts: &SoftmaxOptions,
) -> Result<ThetaInfluence> {
    let (n, p) = x.shape();
    let k = basis.rank();
    let v = basis.columns();
    let t = x * v;
    let (reduced, _) = fit(kind, &t, y, opts)?;
    let (full, _) = fit_projected(kind, x, y, Some(basis), opts)?;
    let kk = y.ncols();
    let free = match kind {
        ModelKind::Linear => kk,
        ModelKind::Softmax => kk - 1,
    };
    let d = k + 1;
    let dim = d * free;

    let per: Vec<(DVector<f64>, DMatrix<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ti: Vec<f64> = t.row(i).iter().copied().collect();
            let yi: Vec<f64> = y.row(i).iter().copied().collect();
            reduced.loss_grad_hess(&ti, &yi)
        })
        .collect();
    let mut h = DMatrix::zeros(dim, dim);
    for (_, hi) in &per {
        h += hi;
    }
    h /= n as f64;
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| SfpError::Conditioning("loss Hessian is not positive definite".into()))?;

    let mut fixed = DMatrix::zeros(n, p * kk);
    for (i, (g, _)) in per.iter().enumerate() {
        let step = -chol.solve(g);
        let mut coef_r = DMatrix::zeros(k, kk);
        for c in 0..free {
            for a in 0..k {
                coef_r[(a, c)] = step[c * d + 1 + a];
            }
        }
        let lifted = v * coef_r;
        fixed.row_mut(i).copy_from(&DVector::from_column_slice(lifted.as_slice()).transpose());
    }

    let mut proj_term = DMatrix::zeros(n, p * kk);
    if let Some(stars) = p_stars {
        if stars.len() != n {
            return Err(SfpError::Dimension("one projection influence per sample required".into()));
        }
        let comp = complement(basis);
        let pm = projection(basis).into_inner();
        let dirs: Vec<(usize, usize)> = (0..k).flat_map(|a| (0..comp.ncols()).map(move |b| (a, b))).collect();
        let derivs: Vec<DVector<f64>> = dirs
            .par_iter()
            .map(|&(a, b)| -> Result<DVector<f64>> {
                let ua = v.column(a);
                let wb = comp.column(b);
                let tdir = &ua * wb.transpose() + &wb * ua.transpose();
                let hstep = PROJECTION_STEP;
                let plus = retract(&(&pm + &tdir * hstep), k)?;
                let minus = retract(&(&pm - &tdir * hstep), k)?;
                let (mp, _) = fit_projected(kind, x, y, Some(&plus), opts)?;
                let (mm, _) = fit_projected(kind, x, y, Some(&minus), opts)?;
                Ok((flat_coefficients(&mp) - flat_coefficients(&mm)) / (2.0 * hstep))
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, ps) in stars.iter().enumerate() {
            let mut acc = DVector::zeros(p * kk);
            for (&(a, b), dv) in dirs.iter().zip(&derivs) {
                let coef = (v.column(a).transpose() * ps * comp.column(b))[0];
                acc.axpy(coef, dv, 1.0);
            }
            proj_term.row_mut(i).copy_from(&acc.transpose());
        }
    }
    Ok(ThetaInfluence {
        values: &fixed + &proj_term,
        fixed_projection: fixed,
        projection_term: proj_term,
        theta: flat_coefficients(&full),
    })
}

/// Orthonormal basis of the orthogonal complement of `span(basis)`.
pub fn complement(basis: &OrthonormalBasis) -> DMatrix<f64> {
    let p = basis.dim();
    let q = DMatrix::identity(p, p) - projection(basis).into_inner();
    let eig = sym_eig(&SymMatrix::new(q).expect("finite"));
    eig.vectors().columns(0, p - basis.rank()).into_owned()
}

/// Column means and standard errors of per-sample influence values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringCheck {
    pub max_abs_z: f64,
    /// Coordinates with non-negligible spread.
    pub coordinates: usize,
    pub violations: usize,
}

/// `|mean| ≤ 3·sd/√n` per column; columns with zero spread must have zero mean.
pub fn centering_check(values: &DMatrix<f64>) -> CenteringCheck {
    let n = values.nrows() as f64;
    let scale = values.amax().max(f64::MIN_POSITIVE);
    let mut out = CenteringCheck {
        max_abs_z: 0.0,
        coordinates: 0,
        violations: 0,
    };
    for col in values.column_iter() {
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if sd <= 1e-12 * scale {
            if mean.abs() > 1e-9 * scale {
                out.violations += 1;
            }
            continue;
        }
        out.coordinates += 1;
        let z = mean.abs() / (sd / n.sqrt());
        out.max_abs_z = out.max_abs_z.max(z);
        if z > 3.0 {
            out.violations += 1;
        }
    }
    out
}

/// D'Agostino–Pearson omnibus test; returns `(K², p-value)`. Needs `n ≥ 8`.
pub fn dagostino_k2(sample: &[f64]) -> Option<(f64, f64)> {
    let n = sample.len();
    if n < 8 {
        return None;
    }
    let nf = n as f64;
    let mean = sample.iter().sum::<f64>() / nf;
    let m2 = sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    if m2 <= 0.0 {
        return None;
    }
    let m3 = sample.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / nf;
    let m4 = sample.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
    let b1 = m3 / m2.powf(1.5);
    let b2 = m4 / (m2 * m2);

    let y = b1 * ((nf + 1.0) * (nf + 3.0) / (6.0 * (nf - 2.0))).sqrt();
    let beta2 = 3.0 * (nf * nf + 27.0 * nf - 70.0) * (nf + 1.0) * (nf + 3.0)
        / ((nf - 2.0) * (nf + 5.0) * (nf + 7.0) * (nf + 9.0));
    let w2 = -1.0 + (2.0 * (beta2 - 1.0)).sqrt();
    let delta = 1.0 / (0.5 * w2.ln()).sqrt();
    let alpha = (2.0 / (w2 - 1.0)).sqrt();
    let y = if y == 0.0 { 1.0 } else { y };
    let zs = delta * (y / alpha + ((y / alpha).powi(2) + 1.0).sqrt()).ln();

    let e = 3.0 * (nf - 1.0) / (nf + 1.0);
    let varb2 = 24.0 * nf * (nf - 2.0) * (nf - 3.0) / ((nf + 1.0).powi(2) * (nf + 3.0) * (nf + 5.0));
    let x = (b2 - e) / varb2.sqrt();
    let sqrtbeta1 = 6.0 * (nf * nf - 5.0 * nf + 2.0) / ((nf + 7.0) * (nf + 9.0))
        * (6.0 * (nf + 3.0) * (nf + 5.0) / (nf * (nf - 2.0) * (nf - 3.0))).sqrt();
    let a = 6.0 + 8.0 / sqrtbeta1 * (2.0 / sqrtbeta1 + (1.0 + 4.0 / (sqrtbeta1 * sqrtbeta1)).sqrt());
    let term1 = 1.0 - 2.0 / (9.0 * a);
    let denom = 1.0 + x * (2.0 / (a - 4.0)).sqrt();
    if denom == 0.0 {
        return None;
    }
    let term2 = denom.signum() * ((1.0 - 2.0 / a) / denom.abs()).cbrt();
    let zk = (term1 - term2) / (2.0 / (9.0 * a)).sqrt();

    let k2 = zs * zs + zk * zk;
    Some((k2, (-k2 / 2.0).exp()))
}

/// Monte Carlo settings for [`mc_normality`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub synth: SynthConfig,
    pub n_list: Vec<usize>,
    pub replications: usize,
    /// Projection levels; `None` means `0` and `s`.
    pub levels: Option<Vec<usize>>,
    pub decomposition: DecompositionConfig,
    pub model: ModelKind,
    pub seed: u64,
    /// Coordinates per level that get a normality test.
    pub normality_coordinates: usize,
}

impl MonteCarloConfig {
    pub fn new(synth: SynthConfig, n_list: Vec<usize>, replications: usize, seed: u64) -> Self {
        Self {
            synth,
            n_list,
            replications,
            levels: None,
            decomposition: DecompositionConfig {
                seed,
                ..DecompositionConfig::default()
            },
            model: ModelKind::Linear,
            seed,
            normality_coordinates: 5,
        }
    }
}

/// Sampling behaviour of the coefficients at one projection level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAsymptotics {
    pub m: usize,
    /// Per sample size, per coordinate standard deviation.
    pub sd: Vec<Vec<f64>>,
    /// `sd(n_i) / sd(n_{i+1})` per consecutive pair and coordinate.
    pub scaling_ratios: Vec<Vec<f64>>,
    /// `√(n_{i+1}/n_i)` per pair.
    pub expected_ratios: Vec<f64>,
    /// Share of coordinates whose ratio is within ±15% of the expected value.
    pub fraction_in_band: Vec<f64>,
    /// Per sample size, D'Agostino p-values of the leading coordinates.
    pub normality_p_values: Vec<Vec<f64>>,
    /// Per sample size, mean of `‖θ̂^(m) − θ̂‖²`.
    pub mean_sq_distance: Vec<f64>,
    /// `‖θ̃^(m) − θ̃‖²` at the reference sample size.
    pub reference_sq_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub functional: String,
    pub n_list: Vec<usize>,
    pub replications: usize,
    pub n_ref: usize,
    pub ranks: FixedRanks,
    pub levels: Vec<LevelAsymptotics>,
    /// Closed form against finite differences on one reference-sized sample.
    pub validation: Option<FdValidation>,
    pub caveats: Vec<String>,
}

fn sample_truth(cfg: &MonteCarloConfig) -> Result<Truth> {
    let small = SynthConfig {
        n: 2,
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    Ok(generate(&small)?.truth.expect("synthetic data carries truth"))
}

/// Coefficients at each level plus the raw-covariate coefficients.
fn fit_levels(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: &[usize],
    levels: &[usize],
    cfg: &MonteCarloConfig,
    ranks: Option<FixedRanks>,
) -> Result<(Vec<DVector<f64>>, DVector<f64>, FixedRanks)> {
    let dcfg = DecompositionConfig {
        fixed_ranks: ranks,
        ..cfg.decomposition.clone()
    };
    let fam = estimate_family(x, Target::Continuous(y), z, &dcfg)?;
    let got = FixedRanks {
        shared: fam.s(),
        sensitive: fam.diagnostics.sensitive_rank,
        unshared: fam.diagnostics.unshared_rank,
    };
    let opts = SoftmaxOptions::default();
    let mut out = Vec::with_capacity(levels.len());
    for &m in levels {
        let basis = fam.basis(m.min(fam.s()))?;
        let (model, _) = fit_projected(cfg.model, x, y, Some(&basis), &opts)?;
        out.push(flat_coefficients(&model));
    }
    let (base, _) = fit_projected(cfg.model, x, y, None, &opts)?;
    Ok((out, flat_coefficients(&base), got))
}

fn sd_columns(rows: &[DVector<f64>]) -> Vec<f64> {
    let r = rows.len() as f64;
    let dim = rows[0].len();
    (0..dim)
        .map(|j| {
            let mean = rows.iter().map(|v| v[j]).sum::<f64>() / r;
            (rows.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
        })
        .collect()
}

/// Simulates the sampling distribution of the fitted coefficients at each
/// projection level over `n_list`, with ranks fixed from a reference sample
/// of size `10·max(n_list)`.
pub fn mc_normality(cfg: &MonteCarloConfig) -> Result<AsymptoticReport> {
    if cfg.replications < 100 {
        return Err(SfpError::Input("mc_normality needs at least 100 replications".into()));
    }
    if cfg.n_list.is_empty() {
        return Err(SfpError::Input("n_list is empty".into()));
    }
    let truth = sample_truth(cfg)?;
    let n_ref = 10 * cfg.n_list.iter().copied().max().unwrap_or(0);
    let ref_cfg = SynthConfig {
        n: n_ref,
        ..cfg.synth.clone()
    };
    let ref_data = resample(&ref_cfg, &truth, rng::derive_seed(cfg.seed, 0x5eed))?;
    let probe = fit_levels(&ref_data.x, &ref_data.y, &ref_data.z, &[0], cfg, cfg.decomposition.fixed_ranks)?;
    let ranks = probe.2;
    let levels: Vec<usize> = cfg
        .levels
        .clone()
        .unwrap_or_else(|| if ranks.shared > 0 { vec![0, ranks.shared] } else { vec![0] });
    if let Some(&bad) = levels.iter().find(|&&m| m > ranks.shared) {
        return Err(SfpError::Dimension(format!("level {bad} exceeds s = {}", ranks.shared)));
    }
    let (ref_levels, ref_base, _) = fit_levels(&ref_data.x, &ref_data.y, &ref_data.z, &levels, cfg, Some(ranks))?;

    let mut per_n: Vec<Vec<(Vec<DVector<f64>>, DVector<f64>)>> = Vec::new();
    for (ni, &n) in cfg.n_list.iter().enumerate() {
        let scfg = SynthConfig { n, ..cfg.synth.clone() };
        let reps = (0..cfg.replications)
            .into_par_iter()
            .map(|b| -> Result<(Vec<DVector<f64>>, DVector<f64>)> {
                let seed = rng::derive_seed(cfg.seed, ((ni as u64) << 32) | b as u64);
                let ds = resample(&scfg, &truth, seed)?;
                let (lv, base, _) = fit_levels(&ds.x, &ds.y, &ds.z, &levels, cfg, Some(ranks))?;
                Ok((lv, base))
            })
            .collect::<Result<Vec<_>>>()?;
        per_n.push(reps);
    }

    let mut out_levels = Vec::new();
    for (li, &m) in levels.iter().enumerate() {
        let sd: Vec<Vec<f64>> = per_n
            .iter()
            .map(|reps| sd_columns(&reps.iter().map(|r| r.0[li].clone()).collect::<Vec<_>>()))
            .collect();
        let mut ratios = Vec::new();
        let mut expected = Vec::new();
        let mut in_band = Vec::new();
        for i in 0..cfg.n_list.len().saturating_sub(1) {
            let e = (cfg.n_list[i + 1] as f64 / cfg.n_list[i] as f64).sqrt();
            let r: Vec<f64> = sd[i]
                .iter()
                .zip(&sd[i + 1])
                .filter(|(_, b)| **b > 1e-12)
                .map(|(a, b)| a / b)
                .collect();
            let hits = r.iter().filter(|v| (**v / e - 1.0).abs() <= 0.15).count();
            in_band.push(if r.is_empty() { 0.0 } else { hits as f64 / r.len() as f64 });
            ratios.push(r);
            expected.push(e);
        }
        let normality: Vec<Vec<f64>> = per_n
            .iter()
            .map(|reps| {
                let dim = reps[0].0[li].len();
                (0..dim)
                    .filter(|&j| reps.iter().any(|r| (r.0[li][j] - reps[0].0[li][j]).abs() > 0.0))
                    .take(cfg.normality_coordinates)
                    .filter_map(|j| dagostino_k2(&reps.iter().map(|r| r.0[li][j]).collect::<Vec<_>>()).map(|v| v.1))
                    .collect()
            })
            .collect();
        let msd: Vec<f64> = per_n
            .iter()
            .map(|reps| reps.iter().map(|r| (&r.0[li] - &r.1).norm_squared()).sum::<f64>() / reps.len() as f64)
            .collect();
        out_levels.push(LevelAsymptotics {
            m,
            sd,
            scaling_ratios: ratios,
            expected_ratios: expected,
            fraction_in_band: in_band,
            normality_p_values: normality,
            mean_sq_distance: msd,
            reference_sq_distance: (&ref_levels[li] - &ref_base).norm_squared(),
        });
    }
    Ok(AsymptoticReport {
        functional: "projected least-squares coefficients".into(),
        n_list: cfg.n_list.clone(),
        replications: cfg.replications,
        n_ref,
        ranks,
        levels: out_levels,
        validation: None,
        caveats: vec![
            "population coefficients approximated by a single fit at n_ref".into(),
            "ranks fixed from the reference sample".into(),
        ],
    })
}

/// Builds the projection functional for a continuous-target sample.
pub fn functional_for<'a>(
    x: &'a DMatrix<f64>,
    y: &DMatrix<f64>,
    z: &[usize],
    dcfg: &DecompositionConfig,
    ranks: FunctionalRanks,
) -> Result<ProjectionFunctional<'a>> {
    let h = dcfg.slices_for(x.ncols()).min(x.nrows());
    Ok(ProjectionFunctional {
        x,
        y_slices: slice_response(Response::Continuous(y), h, rng::derive_seed(dcfg.seed, 1))?,
        z_slices: slice_response(Response::Labels(z), 2, 0)?,
        target_method: dcfg.sdr_method,
        sensitive_method: dcfg.sensitive_method,
        ridge: dcfg.ridge,
        ranks,
    })
}

/// Agreement between closed-form influence values and Gateaux differences
/// on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdValidation {
    pub n: usize,
    pub eps: f64,
    pub ranks: FunctionalRanks,
    pub level: usize,
    pub probe_indices: Vec<usize>,
    /// Largest relative error over the sensitive, target and shared directions.
    pub eigvec_max_rel: f64,
    /// `M_Y*ΣM_Z + M_YΣ*M_Z + M_YΣM_Z*` against the difference of `M_YΣM_Z`.
    pub product_rule_max_rel: f64,
    pub projection_max_rel: f64,
    pub theta_max_rel: f64,
    /// Per-sample projection influences.
    pub projection_centering: CenteringCheck,
    /// Per-sample coefficient influences.
    pub theta_centering: CenteringCheck,
}

fn vec_rel(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

fn aligned(v: DVector<f64>, reference: &DVector<f64>) -> DVector<f64> {
    if v.dot(reference) < 0.0 {
        -v
    } else {
        v
    }
}

fn weighted_projected_ls(x: &DMatrix<f64>, y: &DMatrix<f64>, basis: &OrthonormalBasis, w: &[f64]) -> Result<DVector<f64>> {
    let v = basis.columns();
    let t = x * v;
    let (n, k) = t.shape();
    let d = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { t[(i, j - 1)] });
    let wd = DMatrix::from_fn(n, k + 1, |i, j| d[(i, j)] * w[i]);
    let coef = (d.transpose() * &wd)
        .cholesky()
        .ok_or_else(|| SfpError::Conditioning("weighted normal equations are singular".into()))?
        .solve(&(wd.transpose() * y));
    let lifted = v * coef.rows(1, k);
    Ok(DVector::from_column_slice(lifted.as_slice()))
}

/// Checks every closed-form influence value at `probe_indices` against
/// Gateaux differences and the centering of the full influence samples at
/// level `m`. Uses least squares for the coefficients.
pub fn fd_validation(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: &[usize],
    dcfg: &DecompositionConfig,
    ranks: FunctionalRanks,
    m: usize,
    probe_indices: &[usize],
    eps: f64,
) -> Result<FdValidation> {
    let f = functional_for(x, y, z, dcfg, ranks)?;
    let n = f.n();
    let c = f.candidates(&f.uniform())?;
    let pieces = f.pieces(&c)?;
    let basis = orthonormalize(&f.spanning_set(&pieces, m));
    let stars: Vec<CandidateInfluence> = (0..n)
        .into_par_iter()
        .map(|i| f.candidate_if(i, eps))
        .collect::<Result<_>>()?;
    let p_stars: Vec<DMatrix<f64>> = stars
        .par_iter()
        .map(|st| f.projection_if(&c, &pieces, st, m))
        .collect::<Result<_>>()?;
    let th = theta_if(ModelKind::Linear, x, y, &basis, Some(&p_stars), &SoftmaxOptions::default())?;

    let mut out = FdValidation {
        n,
        eps,
        ranks,
        level: m,
        probe_indices: probe_indices.to_vec(),
        eigvec_max_rel: 0.0,
        product_rule_max_rel: 0.0,
        projection_max_rel: 0.0,
        theta_max_rel: 0.0,
        projection_centering: centering_check(&DMatrix::from_fn(n, f.p() * f.p(), |i, j| p_stars[i].as_slice()[j])),
        theta_centering: centering_check(&th.values),
    };
    for &idx in probe_indices {
        let star = stars
            .get(idx)
            .ok_or_else(|| SfpError::Dimension(format!("probe index {idx} out of {n}")))?;
        let dirs = f.direction_if(&c, &pieces, star, m)?;
        let groups: [(&Vec<DVector<f64>>, u8); 3] = [(&dirs.sensitive, 0), (&dirs.target, 1), (&dirs.shared, 2)];
        for (closed, which) in groups {
            for (i, v) in closed.iter().enumerate() {
                let pick = |pc: &Pieces| match which {
                    0 => pc.sensitive.vector(i),
                    1 => pc.target_resid.vector(i),
                    _ => pc.cross.vector(i),
                };
                let reference = pick(&pieces);
                let fd = gateaux_fd(|w| Ok(aligned(pick(&f.pieces(&f.candidates(w)?)?), &reference)), n, idx, eps)?;
                out.eigvec_max_rel = out.eigvec_max_rel.max(vec_rel(v, &fd, 1e-8));
            }
        }
        let fd = gateaux_fd_matrix(
            |w| {
                let c = f.candidates(w)?;
                Ok(c.m_y.matrix() * c.sigma.matrix() * c.m_z.matrix())
            },
            n,
            idx,
            eps,
        )?;
        out.product_rule_max_rel = out.product_rule_max_rel.max(relative_error(&lemma_product(&c, star), &fd, 1e-10));
        let fd = gateaux_fd_matrix(|w| Ok(f.projection_at(w, m)?.into_inner()), n, idx, eps)?;
        out.projection_max_rel = out.projection_max_rel.max(relative_error(&p_stars[idx], &fd, 1e-8));
        let fd = gateaux_fd(
            |w| {
                let b = sym_eig(&f.projection_at(w, m)?).leading_basis(basis.rank());
                weighted_projected_ls(x, y, &b, w)
            },
            n,
            idx,
            eps,
        )?;
        out.theta_max_rel = out.theta_max_rel.max(vec_rel(&th.values.row(idx).transpose(), &fd, 1e-8));
    }
    Ok(out)
}
