//! Slicing-based inverse regression: SIR and SAVE candidate matrices.
//!
//! All estimators accept optional per-sample weights. Unweighted calls use the
//! usual unbiased moments; weighted calls (used for influence diagnostics)
//! use population moments under the given probability weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfpError};
use crate::linalg::{inv_sqrt, sym_eig, EigenPairs, OrthonormalBasis, SymMatrix};
use crate::rng;

const KMEANS_ITERS: usize = 50;
static SMALL_SLICE_WARNED: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);
/// k-means clusters smaller than `n / (KMEANS_MIN_SHARE · h)` (and never
/// below 2) are dissolved into their nearest surviving cluster.
const KMEANS_MIN_SHARE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdrMethod {
    Sir,
    Save,
}

impl std::fmt::Display for SdrMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SdrMethod::Sir => write!(f, "sir"),
            SdrMethod::Save => write!(f, "save"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceStrategy {
    Quantile,
    Category,
    Kmeans,
}

/// A response to be sliced.
#[derive(Debug, Clone, Copy)]
pub enum Response<'a> {
    /// Continuous `n × k`. One column is sliced by quantiles, several by k-means.
    Continuous(&'a DMatrix<f64>),
    /// Discrete labels; one slice per observed level.
    Labels(&'a [usize]),
}

impl Response<'_> {
    pub fn len(&self) -> usize {
        match self {
            Response::Continuous(y) => y.nrows(),
            Response::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Slice label per sample, with no empty slices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceAssignment {
    labels: Vec<usize>,
    counts: Vec<usize>,
    strategy: SliceStrategy,
}

impl SliceAssignment {
    /// Builds an assignment from raw labels, compacting away unused label values.
    pub fn from_labels(raw: &[usize], strategy: SliceStrategy) -> Self {
        let mut levels: Vec<usize> = raw.to_vec();
        levels.sort_unstable();
        levels.dedup();
        let labels: Vec<usize> = raw
            .iter()
            .map(|v| levels.binary_search(v).expect("level present"))
            .collect();
        let mut counts = vec![0; levels.len()];
        for &l in &labels {
            counts[l] += 1;
        }
        Self {
            labels,
            counts,
            strategy,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn strategy(&self) -> SliceStrategy {
        self.strategy
    }

    pub fn n_slices(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Restricts the assignment to the given rows (with repetition allowed).
    pub fn subset(&self, rows: &[usize]) -> Self {
        let raw: Vec<usize> = rows.iter().map(|&i| self.labels[i]).collect();
        Self::from_labels(&raw, self.strategy)
    }
}

/// Slices a response into at most `h` groups.
///
/// Labels always get one slice per level regardless of `h`. A single
/// continuous column is cut into `h` equal-count slices after a stable sort on
/// (value, index). Multi-column responses are clustered by k-means++ seeded
/// from `seed`.
pub fn slice_response(response: Response<'_>, h: usize, seed: u64) -> Result<SliceAssignment> {
    let n = response.len();
    match response {
        Response::Labels(labels) => {
            if n == 0 {
                return Err(SfpError::Input("cannot slice an empty response".into()));
            }
            Ok(SliceAssignment::from_labels(labels, SliceStrategy::Category))
        }
        Response::Continuous(y) => {
            if h == 0 || h > n {
                return Err(SfpError::Input(format!(
                    "number of slices {h} must be in 1..={n}"
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(SfpError::Input("response has non-finite values".into()));
            }
            if y.ncols() == 1 {
                Ok(quantile_slices(y.column(0).as_slice(), h))
            } else {
                Ok(kmeans_slices(y, h, seed))
            }
        }
    }
}

fn quantile_slices(y: &[f64], h: usize) -> SliceAssignment {
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
    let mut raw = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        raw[i] = rank * h / n;
    }
    SliceAssignment::from_labels(&raw, SliceStrategy::Quantile)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_slices(y: &DMatrix<f64>, h: usize, seed: u64) -> SliceAssignment {
    let n = y.nrows();
    let k = y.ncols();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| y.row(i).iter().copied().collect()).collect();
    let mut rng = rng::seeded(seed);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(h);
    centers.push(rows[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < h {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(rows[next].clone());
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &centers[centers.len() - 1]));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let best = nearest(r, &centers);
            if best != labels[i] {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; k]; h];
        let mut counts = vec![0usize; h];
        for (i, r) in rows.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(r) {
                *s += v;
            }
        }
        for c in 0..h {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed an empty cluster at the worst-fit point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&rows[a], &centers[labels[a]])
                            .total_cmp(&sq_dist(&rows[b], &centers[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                centers[c] = rows[far].clone();
                labels[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    merge_small_clusters(&rows, &mut labels, &centers, (n / (KMEANS_MIN_SHARE * h)).max(2));
    SliceAssignment::from_labels(&labels, SliceStrategy::Kmeans)
}

fn merge_small_clusters(rows: &[Vec<f64>], labels: &mut [usize], centers: &[Vec<f64>], min_size: usize) {
    let h = centers.len();
    let mut alive = vec![true; h];
    loop {
        let mut counts = vec![0usize; h];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let live = alive.iter().filter(|a| **a).count();
        let smallest = (0..h)
            .filter(|&c| alive[c] && counts[c] < min_size)
            .min_by(|&a, &b| counts[a].cmp(&counts[b]).then(a.cmp(&b)));
        let Some(c) = smallest else { break };
        if live <= 1 {
            break;
        }
        alive[c] = false;
        for (i, r) in rows.iter().enumerate() {
            if labels[i] == c {
                labels[i] = (0..h)
                    .filter(|&d| alive[d])
                    .min_by(|&a, &b| sq_dist(r, &centers[a]).total_cmp(&sq_dist(r, &centers[b])).then(a.cmp(&b)))
                    .expect("a live cluster remains");
            }
        }
    }
}

fn nearest(r: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(r, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Uniform probability weights.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Moment convention for weighted estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moments {
    /// Reliability-weight correction `1 / (1 − Σw²)`; equals the `n − 1` divisor
    /// for uniform weights.
    Unbiased,
    /// Plain weighted averages; the natural plug-in functional.
    Population,
}

fn check_weights(n: usize, w: &[f64]) -> Result<()> {
    if w.len() != n {
        return Err(SfpError::Dimension(format!(
            "{} weights for {n} samples",
            w.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(SfpError::Input("non-finite sample weight".into()));
    }
    Ok(())
}

/// Weighted mean and covariance of the rows of `x`. Weights must sum to one.
pub fn weighted_moments(
    x: &DMatrix<f64>,
    w: &[f64],
    moments: Moments,
) -> Result<(DVector<f64>, SymMatrix)> {
    let (n, p) = x.shape();
    check_weights(n, w)?;
    let mean = x.transpose() * DVector::from_column_slice(w);
    let centered = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - mean[j]);
    let scaled = DMatrix::from_fn(n, p, |i, j| centered[(i, j)] * w[i]);
    let mut cov = scaled.transpose() * centered;
    if moments == Moments::Unbiased {
        let denom = 1.0 - w.iter().map(|v| v * v).sum::<f64>();
        if denom <= 0.0 {
            return Err(SfpError::Input("covariance needs at least two samples".into()));
        }
        cov /= denom;
    }
    Ok((mean, SymMatrix::new(cov)?))
}

/// Unbiased sample covariance (divisor `n − 1`).
pub fn covariance(x: &DMatrix<f64>) -> Result<SymMatrix> {
    let n = x.nrows();
    if n < 2 {
        return Err(SfpError::Input(format!(
            "covariance needs n >= 2, got {n}"
        )));
    }
    Ok(weighted_moments(x, &uniform_weights(n), Moments::Unbiased)?.1)
}

/// A candidate matrix for a central subspace together with its spectrum.
#[derive(Debug, Clone)]
pub struct CandidateEstimate {
    /// Candidate in original covariate coordinates.
    pub m: SymMatrix,
    /// Candidate in standardized coordinates, before back-transformation.
    pub m_std: SymMatrix,
    /// Eigen-decomposition of `m`.
    pub eigen: EigenPairs,
    pub method: SdrMethod,
    pub slices: SliceAssignment,
    /// Sample covariance used for standardization.
    pub sigma: SymMatrix,
    /// `(Σ + ridge)^{-1/2}`.
    pub whitener: SymMatrix,
}

impl CandidateEstimate {
    /// Top-`k` eigenvectors of the candidate.
    pub fn basis(&self, k: usize) -> OrthonormalBasis {
        self.eigen.leading_basis(k)
    }
}

/// Candidate matrices and covariance under given weights and moment convention.
pub struct WeightedCandidate {
    pub m: SymMatrix,
    pub m_std: SymMatrix,
    pub sigma: SymMatrix,
    pub whitener: SymMatrix,
}

/// SIR or SAVE candidate under arbitrary sample weights (slices held fixed).
pub fn weighted_candidate(
    method: SdrMethod,
    x: &DMatrix<f64>,
    slices: &SliceAssignment,
    w: &[f64],
    ridge: f64,
    moments: Moments,
) -> Result<WeightedCandidate> {
    let (n, p) = x.shape();
    if slices.len() != n {
        return Err(SfpError::Dimension(format!(
            "{} slice labels for {n} samples",
            slices.len()
        )));
    }
    let (mean, sigma) = weighted_moments(x, w, moments)?;
    let whitener = inv_sqrt(&sigma, ridge)?;
    let z = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - mean[j]) * whitener.matrix();

    let hs = slices.n_slices();
    let mut mass = vec![0.0; hs];
    for (i, &l) in slices.labels().iter().enumerate() {
        mass[l] += w[i];
    }
    let mut m_std = DMatrix::zeros(p, p);
    match method {
        SdrMethod::Sir => {
            let mut sums = vec![DVector::<f64>::zeros(p); hs];
            for (i, &l) in slices.labels().iter().enumerate() {
                sums[l].axpy(w[i], &z.row(i).transpose(), 1.0);
            }
            for h in 0..hs {
                if mass[h] == 0.0 {
                    continue;
                }
                let mbar = &sums[h] / mass[h];
                m_std += (&mbar * mbar.transpose()) * mass[h];
            }
        }
        SdrMethod::Save => {
            for h in 0..hs {
                if slices.counts()[h] < 2 {
                    return Err(SfpError::Input(format!(
                        "SAVE slice {h} has {} sample(s); need at least 2",
                        slices.counts()[h]
                    )));
                }
                if slices.counts()[h] < p + 1 {
                    if SMALL_SLICE_WARNED.swap(true, std::sync::atomic::Ordering::Relaxed) {
                        log::debug!("SAVE slice {h} has {} samples for p = {p}", slices.counts()[h]);
                    } else {
                        log::warn!(
                            "SAVE slice {h} has {} samples for p = {p} (further occurrences logged at debug level)",
                            slices.counts()[h]
                        );
                    }
                }
            }
            let mut rows_by: Vec<Vec<usize>> = vec![Vec::new(); hs];
            for (i, &l) in slices.labels().iter().enumerate() {
                rows_by[l].push(i);
            }
            let eye = DMatrix::<f64>::identity(p, p);
            for (h, rows) in rows_by.iter().enumerate() {
                if mass[h] == 0.0 {
                    continue;
                }
                let zh = DMatrix::from_fn(rows.len(), p, |a, j| z[(rows[a], j)]);
                let wh: Vec<f64> = rows.iter().map(|&i| w[i] / mass[h]).collect();
                let (_, vh) = weighted_moments(&zh, &wh, moments)?;
                let d = &eye - vh.matrix();
                m_std += (&d * &d) * mass[h];
            }
        }
    }
    let m_std = SymMatrix::new(m_std)?;
    let m = SymMatrix::new(whitener.matrix() * m_std.matrix() * whitener.matrix())?;
    Ok(WeightedCandidate {
        m,
        m_std,
        sigma,
        whitener,
    })
}

fn candidate(
    method: SdrMethod,
    x: &DMatrix<f64>,
    slices: &SliceAssignment,
    ridge: f64,
) -> Result<CandidateEstimate> {
    let n = x.nrows();
    if n < 2 {
        return Err(SfpError::Input(format!("need n >= 2 samples, got {n}")));
    }
    let wc = weighted_candidate(method, x, slices, &uniform_weights(n), ridge, Moments::Unbiased)?;
    let eigen = sym_eig(&wc.m);
    Ok(CandidateEstimate {
        m: wc.m,
        m_std: wc.m_std,
        eigen,
        method,
        slices: slices.clone(),
        sigma: wc.sigma,
        whitener: wc.whitener,
    })
}

/// Sliced inverse regression: weighted outer products of standardized slice means.
pub fn sir_candidate(
    x: &DMatrix<f64>,
    slices: &SliceAssignment,
    ridge: f64,
) -> Result<CandidateEstimate> {
    candidate(SdrMethod::Sir, x, slices, ridge)
}

/// Sliced average variance estimation: `Σ_h p_h (I − V_h)²` in standardized scale.
pub fn save_candidate(
    x: &DMatrix<f64>,
    slices: &SliceAssignment,
    ridge: f64,
) -> Result<CandidateEstimate> {
    candidate(SdrMethod::Save, x, slices, ridge)
}

/// Dispatches to [`sir_candidate`] or [`save_candidate`].
pub fn estimate_candidate(
    method: SdrMethod,
    x: &DMatrix<f64>,
    slices: &SliceAssignment,
    ridge: f64,
) -> Result<CandidateEstimate> {
    candidate(method, x, slices, ridge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DEFAULT_RIDGE;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::seeded(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut r))
    }

    #[test]
    fn category_slices_follow_class_counts() {
        let z = [0, 1, 1, 0, 1];
        let s = slice_response(Response::Labels(&z), 7, 0).unwrap();
        assert_eq!(s.counts(), &[2, 3]);
        assert_eq!(s.strategy(), SliceStrategy::Category);
    }

    #[test]
    fn quantile_slices_equal_counts() {
        let mut r = rng::seeded(3);
        let y = DMatrix::from_fn(100, 1, |_, _| r.random::<f64>());
        let s = slice_response(Response::Continuous(&y), 4, 0).unwrap();
        assert_eq!(s.counts(), &[25, 25, 25, 25]);
        // slices are ordered by value
        let lab = s.labels();
        for i in 0..100 {
            for j in 0..100 {
                if y[(i, 0)] < y[(j, 0)] {
                    assert!(lab[i] <= lab[j]);
                }
            }
        }
    }

    #[test]
    fn too_many_slices_rejected() {
        let y = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(
            slice_response(Response::Continuous(&y), 4, 0),
            Err(SfpError::Input(_))
        ));
    }

    #[test]
    fn kmeans_slices_deterministic_and_full() {
        let y = gaussian(2000, 5, 8);
        let a = slice_response(Response::Continuous(&y), 11, 42).unwrap();
        let b = slice_response(Response::Continuous(&y), 11, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_slices(), 11);
        assert!(a.counts().iter().all(|&c| c > 0));
    }

    #[test]
    fn covariance_hand_cases() {
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 0.0]);
        let c = covariance(&x).unwrap();
        assert_eq!(c.matrix(), &DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        assert!(matches!(
            covariance(&DMatrix::zeros(1, 2)),
            Err(SfpError::Input(_))
        ));
        let x = gaussian(5000, 10, 1);
        let c = covariance(&x).unwrap();
        assert!((c.matrix() - DMatrix::<f64>::identity(10, 10)).amax() < 0.15);
    }

    #[test]
    fn sir_recovers_linear_direction() {
        let n = 2000;
        let p = 10;
        let x = gaussian(n, p, 2);
        let beta = DVector::from_fn(p, |i, _| if i < 2 { 1.0 } else { 0.0 }).normalize();
        let mut r = rng::seeded(99);
        let y = DMatrix::from_fn(n, 1, |i, _| {
            (x.row(i) * &beta)[0] + 0.3 * { let e: f64 = StandardNormal.sample(&mut r); e }
        });
        let s = slice_response(Response::Continuous(&y), 11, 0).unwrap();
        let est = sir_candidate(&x, &s, DEFAULT_RIDGE).unwrap();
        let cos = est.eigen.vector(0).normalize().dot(&beta).abs();
        assert!(cos > 0.95, "cos {cos}");
    }

    #[test]
    fn binary_sir_has_rank_one() {
        let x = gaussian(300, 6, 5);
        let z: Vec<usize> = (0..300).map(|i| (x[(i, 0)] > 0.0) as usize).collect();
        let s = slice_response(Response::Labels(&z), 2, 0).unwrap();
        let est = sir_candidate(&x, &s, DEFAULT_RIDGE).unwrap();
        assert_eq!(est.eigen.positive_count(1e-10), 1);
    }

    #[test]
    fn save_finds_symmetric_link_where_sir_fails() {
        let n = 4000;
        let p = 6;
        let x = gaussian(n, p, 12);
        let mut r = rng::seeded(13);
        let y = DMatrix::from_fn(n, 1, |i, _| {
            x[(i, 0)].powi(2) + 0.2 * { let e: f64 = StandardNormal.sample(&mut r); e }
        });
        let s = slice_response(Response::Continuous(&y), 7, 0).unwrap();
        let save = save_candidate(&x, &s, DEFAULT_RIDGE).unwrap();
        assert!(save.eigen.vector(0)[0].abs() / save.eigen.vector(0).norm() > 0.9);
        let sir = sir_candidate(&x, &s, DEFAULT_RIDGE).unwrap();
        assert!(sir.eigen.values()[0] < 5.0 * 7.0 / n as f64);
    }

    #[test]
    fn save_single_slice_is_zero() {
        let x = gaussian(500, 4, 3);
        let s = SliceAssignment::from_labels(&vec![0; 500], SliceStrategy::Quantile);
        let m = save_candidate(&x, &s, 0.0).unwrap();
        assert!(m.m.matrix().amax() < 1e-10);
    }

    #[test]
    fn save_rejects_singleton_slice() {
        let x = gaussian(10, 2, 3);
        let mut raw = vec![0; 10];
        raw[9] = 1;
        let s = SliceAssignment::from_labels(&raw, SliceStrategy::Category);
        assert!(matches!(
            save_candidate(&x, &s, 0.0),
            Err(SfpError::Input(_))
        ));
    }

    #[test]
    fn weighted_uniform_matches_unweighted() {
        let x = gaussian(200, 3, 4);
        let w = uniform_weights(200);
        let (_, a) = weighted_moments(&x, &w, Moments::Unbiased).unwrap();
        let (_, b) = weighted_moments(&x, &w, Moments::Population).unwrap();
        assert!((a.matrix() * (199.0 / 200.0) - b.matrix()).amax() < 1e-12);
    }
}
