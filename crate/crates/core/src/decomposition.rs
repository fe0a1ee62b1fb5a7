//! Shared/unshared subspace decomposition and the nested projection family.
//!
//! The target and sensitive candidate matrices give a cross candidate whose
//! leading generalized eigenvectors span the shared directions. Target
//! directions orthogonal to the sensitive subspace are estimated by running
//! SDR on covariates projected onto the complement of the sensitive subspace.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfpError};
use crate::ladle::{default_kmax, ladle_rank, LadleConfig, LadleResult};
use crate::linalg::{
    gen_eig, inv_sqrt, orthonormalize, orthonormalize_ordered, projection, sym_eig, symmetrize,
    OrthonormalBasis, SymMatrix, DEFAULT_RIDGE,
};
use crate::rng::derive_seed;
use crate::sdr::{
    estimate_candidate, slice_response, weighted_candidate, CandidateEstimate, Moments, Response,
    SdrMethod, SliceAssignment, SliceStrategy,
};

/// Relative threshold for counting positive generalized eigenvalues.
pub const POSITIVE_EIG_TOL: f64 = 1e-10;

/// Estimation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecompositionConfig {
    /// Method for the target candidate and the unshared search.
    pub sdr_method: SdrMethod,
    /// Method for the sensitive candidate.
    pub sensitive_method: SdrMethod,
    /// Slices for continuous targets; `None` means `p + 1`.
    pub slices: Option<usize>,
    pub bootstrap: usize,
    /// Largest rank the ladle considers; `None` means `min(p − 2, 12)`.
    pub kmax: Option<usize>,
    pub ridge: f64,
    pub seed: u64,
    /// Skip rank estimation and use these ranks (shared, sensitive, unshared).
    pub fixed_ranks: Option<FixedRanks>,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            sdr_method: SdrMethod::Save,
            sensitive_method: SdrMethod::Save,
            slices: None,
            bootstrap: 30,
            kmax: None,
            ridge: DEFAULT_RIDGE,
            seed: 0,
            fixed_ranks: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedRanks {
    pub shared: usize,
    pub sensitive: usize,
    pub unshared: usize,
}

impl DecompositionConfig {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.bootstrap == 0 {
            return Err(SfpError::Input("bootstrap must be at least 1".into()));
        }
        if let Some(k) = self.kmax {
            if k == 0 || k >= p {
                return Err(SfpError::Input(format!("kmax {k} must be in 1..={}", p.saturating_sub(1))));
            }
        }
        if !(self.ridge >= 0.0) {
            return Err(SfpError::Input("ridge must be >= 0".into()));
        }
        Ok(())
    }

    fn kmax_for(&self, dim: usize) -> usize {
        self.kmax.unwrap_or_else(|| default_kmax(dim)).min(dim).max(1)
    }

    pub fn slices_for(&self, p: usize) -> usize {
        self.slices.unwrap_or(p + 1)
    }
}

/// A candidate matrix with its selected rank and leading eigenvectors.
#[derive(Debug, Clone)]
pub struct CentralSubspace {
    pub candidate: CandidateEstimate,
    pub rank: usize,
    pub basis: OrthonormalBasis,
}

/// `sym(M_Y Σ M_Z)`.
pub fn cross_candidate(m_y: &SymMatrix, sigma: &SymMatrix, m_z: &SymMatrix) -> SymMatrix {
    let c = m_y.matrix() * sigma.matrix() * m_z.matrix();
    SymMatrix::new(symmetrize(&c)).expect("product of finite matrices is finite")
}

/// Whitened cross candidate `W·sym(M_Y Σ M_Z)·W`, whose ordinary spectrum is
/// the generalized spectrum of the cross candidate against `Σ`.
pub fn whitened_cross(m_y: &SymMatrix, sigma: &SymMatrix, m_z: &SymMatrix, ridge: f64) -> Result<SymMatrix> {
    let w = inv_sqrt(sigma, ridge)?;
    let c = cross_candidate(m_y, sigma, m_z);
    SymMatrix::new(w.matrix() * c.matrix() * w.matrix())
}

/// Euclidean-orthonormal basis for the top-`s` generalized eigenvectors of
/// the cross candidate, ordered by decreasing eigenvalue.
pub fn intersection_basis(
    m_y: &SymMatrix,
    m_z: &SymMatrix,
    sigma: &SymMatrix,
    s: usize,
    ridge: f64,
) -> Result<OrthonormalBasis> {
    let p = sigma.dim();
    if s == 0 {
        return Ok(OrthonormalBasis::empty(p));
    }
    let eig = gen_eig(&cross_candidate(m_y, sigma, m_z), sigma, ridge)?;
    let positive = eig.positive_count(POSITIVE_EIG_TOL);
    if s > positive {
        return Err(SfpError::Dimension(format!(
            "requested {s} shared directions but only {positive} positive eigenvalues"
        )));
    }
    let basis = eig.leading_basis(s);
    if basis.rank() < s {
        return Err(SfpError::Dimension(format!(
            "leading {s} eigenvectors span only {} dimensions",
            basis.rank()
        )));
    }
    Ok(basis)
}

/// `I − ΨΨᵀ`.
pub fn residual_projection(psi: &OrthonormalBasis) -> SymMatrix {
    let p = psi.dim();
    SymMatrix::new(DMatrix::identity(p, p) - projection(psi).into_inner()).expect("finite")
}

/// Orthonormal basis of `range(Q)` for a projector `Q`.
pub fn range_basis(q: &SymMatrix) -> OrthonormalBasis {
    let eig = sym_eig(q);
    let k = eig.values().iter().filter(|&&v| v > 0.5).count();
    orthonormalize_ordered(&eig.vectors().columns(0, k).into_owned())
}

/// The target response used for slicing.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Continuous(&'a DMatrix<f64>),
    Labels(&'a [usize]),
}

impl<'a> Target<'a> {
    fn response(&self) -> Response<'a> {
        match *self {
            Target::Continuous(y) => Response::Continuous(y),
            Target::Labels(l) => Response::Labels(l),
        }
    }
}

/// Slices for the target and the sensitive attribute.
pub fn make_slices(
    target: Target<'_>,
    z: &[usize],
    p: usize,
    cfg: &DecompositionConfig,
) -> Result<(SliceAssignment, SliceAssignment)> {
    let n = z.len();
    let h = cfg.slices_for(p).min(n);
    let y_slices = slice_response(target.response(), h, derive_seed(cfg.seed, 1))?;
    let z_slices = slice_response(Response::Labels(z), 2, 0)?;
    Ok((y_slices, z_slices))
}

fn rows_of(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

fn candidate_on_rows(
    method: SdrMethod,
    x: &DMatrix<f64>,
    slices: &SliceAssignment,
    rows: &[usize],
    ridge: f64,
) -> Result<crate::sdr::WeightedCandidate> {
    let xs = rows_of(x, rows);
    let sl = slices.subset(rows);
    let n = rows.len();
    weighted_candidate(method, &xs, &sl, &vec![1.0 / n as f64; n], ridge, Moments::Unbiased)
}

fn ladle_cfg(cfg: &DecompositionConfig, dim: usize, label: u64) -> LadleConfig {
    LadleConfig {
        bootstrap: cfg.bootstrap,
        kmax: cfg.kmax_for(dim),
        seed: derive_seed(cfg.seed, label),
    }
}

/// Candidate plus ladle-selected rank.
pub fn central_subspace(
    method: SdrMethod,
    x: &DMatrix<f64>,
    slices: &SliceAssignment,
    cfg: &DecompositionConfig,
    fixed_rank: Option<usize>,
    label: u64,
) -> Result<(CentralSubspace, Option<LadleResult>)> {
    let cand = estimate_candidate(method, x, slices, cfg.ridge)?;
    let (rank, lad) = match fixed_rank {
        Some(r) => (r.min(x.ncols()), None),
        None => {
            let lc = ladle_cfg(cfg, x.ncols(), label);
            let res = ladle_rank(
                |rows| candidate_on_rows(method, x, slices, rows, cfg.ridge).map(|c| c.m_std),
                x.nrows(),
                &lc,
            )?;
            (res.rank, Some(res))
        }
    };
    let basis = cand.basis(rank);
    Ok((
        CentralSubspace {
            candidate: cand,
            rank,
            basis,
        },
        lad,
    ))
}

/// Target directions inside `range(Q_z)`: SDR on `X` expressed in an
/// orthonormal basis of `range(Q_z)`, mapped back to the original coordinates.
pub fn unshared_basis(
    x: &DMatrix<f64>,
    y_slices: &SliceAssignment,
    q_z: &SymMatrix,
    cfg: &DecompositionConfig,
    fixed_rank: Option<usize>,
) -> Result<(OrthonormalBasis, Option<LadleResult>)> {
    let p = x.ncols();
    let v = range_basis(q_z);
    let dim = v.rank();
    if dim == 0 {
        return Ok((OrthonormalBasis::empty(p), None));
    }
    let t = x * v.columns();
    let (sub, lad) = central_subspace(cfg.sdr_method, &t, y_slices, cfg, fixed_rank.map(|r| r.min(dim)), 3)?;
    let lifted = v.columns() * sub.basis.columns();
    Ok((orthonormalize_ordered(&lifted), lad))
}

/// Rank-selection diagnostics attached to a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FamilyDiagnostics {
    pub target_rank: Option<usize>,
    pub sensitive_rank: usize,
    pub shared_rank: usize,
    pub unshared_rank: usize,
    /// Generalized eigenvalues of the cross candidate.
    pub cross_eigenvalues: Vec<f64>,
    pub sensitive_eigenvalues: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Unshared basis `B̃` and ordered shared basis `Φ`; member `m` projects onto
/// `span(B̃) ⊕ span(Φ_{1..m})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairProjectionFamily {
    #[serde(with = "crate::data::report::matrix")]
    unshared: DMatrix<f64>,
    #[serde(with = "crate::data::report::matrix")]
    shared: DMatrix<f64>,
    /// Basis of the estimated sensitive subspace.
    #[serde(with = "crate::data::report::matrix")]
    sensitive: DMatrix<f64>,
    pub diagnostics: FamilyDiagnostics,
}

impl FairProjectionFamily {
    /// Builds a family, making the shared directions orthogonal to `unshared`
    /// while keeping their order.
    pub fn new(unshared: OrthonormalBasis, shared: OrthonormalBasis, sensitive: OrthonormalBasis) -> Self {
        let p = unshared.dim();
        let pu = projection(&unshared).into_inner();
        let resid = (DMatrix::identity(p, p) - pu) * shared.columns();
        let shared = orthonormalize_ordered(&resid);
        Self {
            unshared: unshared.into_columns(),
            shared: shared.into_columns(),
            sensitive: sensitive.into_columns(),
            diagnostics: FamilyDiagnostics::default(),
        }
    }

    pub fn p(&self) -> usize {
        self.unshared.nrows()
    }

    /// Number of shared directions (the largest valid `m`).
    pub fn s(&self) -> usize {
        self.shared.ncols()
    }

    pub fn unshared(&self) -> OrthonormalBasis {
        OrthonormalBasis::try_from_columns(self.unshared.clone()).expect("stored orthonormal")
    }

    pub fn shared(&self) -> OrthonormalBasis {
        OrthonormalBasis::try_from_columns(self.shared.clone()).expect("stored orthonormal")
    }

    pub fn sensitive(&self) -> OrthonormalBasis {
        OrthonormalBasis::try_from_columns(self.sensitive.clone()).expect("stored orthonormal")
    }

    /// Orthonormal basis of the range of member `m`.
    pub fn basis(&self, m: usize) -> Result<OrthonormalBasis> {
        if m > self.s() {
            return Err(SfpError::Dimension(format!("m = {m} exceeds s = {}", self.s())));
        }
        let d = self.unshared.ncols();
        let mut cols = DMatrix::zeros(self.p(), d + m);
        cols.columns_mut(0, d).copy_from(&self.unshared);
        cols.columns_mut(d, m).copy_from(&self.shared.columns(0, m));
        Ok(OrthonormalBasis::from_orthonormal(cols))
    }

    /// `P^(m) = B̃B̃ᵀ + Φ_mΦ_mᵀ`.
    pub fn projection(&self, m: usize) -> Result<SymMatrix> {
        Ok(projection(&self.basis(m)?))
    }

    pub fn rank(&self, m: usize) -> usize {
        self.unshared.ncols() + m.min(self.s())
    }
}

/// Full estimation: candidates, ranks, shared basis, sensitive complement,
/// unshared basis.
pub fn estimate_family(
    x: &DMatrix<f64>,
    target: Target<'_>,
    z: &[usize],
    cfg: &DecompositionConfig,
) -> Result<FairProjectionFamily> {
    let (n, p) = x.shape();
    cfg.validate(p)?;
    if z.len() != n {
        return Err(SfpError::Dimension("z length differs from x rows".into()));
    }
    let mut warnings = Vec::new();
    if n < 10 * p {
        warnings.push(format!("n = {n} is below 10·p = {}", 10 * p));
    }
    let (y_slices, z_slices) = make_slices(target, z, p, cfg)?;
    if y_slices.strategy() == SliceStrategy::Kmeans {
        warnings.push(format!(
            "multivariate target sliced by k-means into {} clusters (pooled SAVE stand-in)",
            y_slices.n_slices()
        ));
    }
    let fixed = cfg.fixed_ranks;

    let (sens, _) = central_subspace(cfg.sensitive_method, x, &z_slices, cfg, fixed.map(|f| f.sensitive), 2)?;
    let y_cand = estimate_candidate(cfg.sdr_method, x, &y_slices, cfg.ridge)?;
    let sigma = &y_cand.sigma;

    let shared_rank = match fixed {
        Some(f) => f.shared,
        None => {
            let lc = ladle_cfg(cfg, p, 4);
            let res = ladle_rank(
                |rows| {
                    let my = candidate_on_rows(cfg.sdr_method, x, &y_slices, rows, cfg.ridge)?;
                    let mz = candidate_on_rows(cfg.sensitive_method, x, &z_slices, rows, cfg.ridge)?;
                    whitened_cross(&my.m, &my.sigma, &mz.m, cfg.ridge)
                },
                n,
                &lc,
            )?;
            res.rank
        }
    };
    let cross_eig = gen_eig(&cross_candidate(&y_cand.m, sigma, &sens.candidate.m), sigma, cfg.ridge)?;
    let shared_rank = shared_rank.min(cross_eig.positive_count(POSITIVE_EIG_TOL));
    let phi = intersection_basis(&y_cand.m, &sens.candidate.m, sigma, shared_rank, cfg.ridge)?;

    let q_z = residual_projection(&sens.basis);
    let (b_tilde, _) = unshared_basis(x, &y_slices, &q_z, cfg, fixed.map(|f| f.unshared))?;

    let mut fam = FairProjectionFamily::new(b_tilde, phi, sens.basis.clone());
    if fam.s() < shared_rank {
        warnings.push(format!(
            "{} shared directions fell inside the unshared span and were dropped",
            shared_rank - fam.s()
        ));
    }
    fam.diagnostics = FamilyDiagnostics {
        target_rank: None,
        sensitive_rank: sens.rank,
        shared_rank: fam.s(),
        unshared_rank: fam.unshared.ncols(),
        cross_eigenvalues: cross_eig.values().to_vec(),
        sensitive_eigenvalues: sens.candidate.eigen.values().to_vec(),
        warnings,
    };
    Ok(fam)
}

/// Pivoted orthonormal basis of a matrix's column span (re-exported for callers
/// that assemble bases from raw directions).
pub fn span_basis(v: &DMatrix<f64>) -> OrthonormalBasis {
    orthonormalize(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_linear_dgp, SynthConfig};
    use crate::linalg::subspace_distance;

    fn oracle() -> (SymMatrix, SymMatrix, crate::data::Truth) {
        let ds = gen_linear_dgp(&SynthConfig { n: 10, ..SynthConfig::linear(3) }).unwrap();
        let t = ds.truth.unwrap();
        let my = SymMatrix::new(t.a_y() * t.a_y().transpose()).unwrap();
        let mz = SymMatrix::new(t.a_z() * t.a_z().transpose()).unwrap();
        (my, mz, t)
    }

    #[test]
    fn cross_candidate_cases() {
        let z = SymMatrix::zeros(4);
        assert_eq!(cross_candidate(&z, &SymMatrix::identity(4), &z), z);
        let (my, mz, _) = oracle();
        let c = cross_candidate(&my, &SymMatrix::identity(10), &mz);
        assert_eq!(sym_eig(&c).positive_count(1e-10), 6);
        let e1 = OrthonormalBasis::coordinate(4, &[0]);
        let e2 = OrthonormalBasis::coordinate(4, &[1]);
        let c = cross_candidate(&projection(&e1), &SymMatrix::identity(4), &projection(&e2));
        assert!(c.matrix().amax() == 0.0);
    }

    #[test]
    fn oracle_intersection_recovered() {
        let (my, mz, t) = oracle();
        let eye = SymMatrix::identity(10);
        let eig = gen_eig(&cross_candidate(&my, &eye, &mz), &eye, 0.0).unwrap();
        assert_eq!(eig.positive_count(1e-10), 6);
        let phi = intersection_basis(&my, &mz, &eye, 6, 0.0).unwrap();
        let truth = OrthonormalBasis::try_from_columns(t.shared()).unwrap();
        assert!(subspace_distance(&phi, &truth) < 1e-8);
        assert_eq!(intersection_basis(&my, &mz, &eye, 0, 0.0).unwrap().rank(), 0);
        assert!(matches!(
            intersection_basis(&my, &mz, &eye, 7, 0.0),
            Err(SfpError::Dimension(_))
        ));
    }

    #[test]
    fn residual_projection_cases() {
        assert_eq!(residual_projection(&OrthonormalBasis::empty(3)), SymMatrix::identity(3));
        let full = OrthonormalBasis::coordinate(3, &[0, 1, 2]);
        assert!(residual_projection(&full).matrix().amax() < 1e-15);
    }

    #[test]
    fn family_members_nest() {
        let (_, _, t) = oracle();
        let b = OrthonormalBasis::try_from_columns(t.unshared()).unwrap();
        let phi = OrthonormalBasis::try_from_columns(t.shared()).unwrap();
        let fam = FairProjectionFamily::new(b, phi, OrthonormalBasis::empty(10));
        assert_eq!(fam.s(), 6);
        for m in 0..=6 {
            let pm = fam.projection(m).unwrap().into_inner();
            assert!((&pm * &pm - &pm).amax() < 1e-10);
            assert!((pm.trace() - (2 + m) as f64).abs() < 1e-10);
            if m < 6 {
                let next = fam.projection(m + 1).unwrap().into_inner();
                assert!((&next * &pm - &pm).amax() < 1e-10);
            }
        }
    }
}
