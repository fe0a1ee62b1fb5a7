//! Group fairness statistics for a binary sensitive attribute.
//!
//! Gap metrics are percentages. Distance covariance uses the biased
//! V-statistic. KS distances and 1-D Wasserstein distances are exact.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfpError};
use crate::linalg::DEFAULT_RIDGE;
use crate::rng;

/// Default subsample size for the `O(n²)` distance covariance.
pub const DCOV_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FairnessMetric {
    Dp,
    Tpr,
    Mcdp,
    Dcov,
}

impl std::str::FromStr for FairnessMetric {
    type Err = SfpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dp" => Ok(Self::Dp),
            "tpr" => Ok(Self::Tpr),
            "mcdp" => Ok(Self::Mcdp),
            "dcov" | "dcov2" => Ok(Self::Dcov),
            other => Err(SfpError::Input(format!("unknown fairness metric '{other}'"))),
        }
    }
}

/// Class probabilities with the sensitive attribute and optional true labels.
#[derive(Debug, Clone)]
pub struct GroupedPredictions<'a> {
    probs: &'a DMatrix<f64>,
    labels: Option<&'a [usize]>,
    z: &'a [usize],
}

impl<'a> GroupedPredictions<'a> {
    pub fn new(probs: &'a DMatrix<f64>, labels: Option<&'a [usize]>, z: &'a [usize]) -> Result<Self> {
        let n = probs.nrows();
        if z.len() != n || labels.is_some_and(|l| l.len() != n) {
            return Err(SfpError::Dimension("predictions, labels and groups differ in length".into()));
        }
        if probs.ncols() < 2 {
            return Err(SfpError::Input("need at least two classes".into()));
        }
        for i in 0..n {
            let s: f64 = probs.row(i).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(SfpError::Input(format!("probability row {i} sums to {s}")));
            }
        }
        if z.iter().any(|&v| v > 1) {
            return Err(SfpError::Input("sensitive attribute must be 0/1".into()));
        }
        Ok(Self { probs, labels, z })
    }

    fn k(&self) -> usize {
        self.probs.ncols()
    }

    fn require_both_groups(&self) -> Result<()> {
        let ones = self.z.iter().filter(|&&v| v == 1).count();
        if ones == 0 || ones == self.z.len() {
            return Err(SfpError::Metric("both sensitive groups must be present".into()));
        }
        Ok(())
    }

    fn column_by_group(&self, j: usize) -> [Vec<f64>; 2] {
        let mut out = [Vec::new(), Vec::new()];
        for (i, &g) in self.z.iter().enumerate() {
            out[g].push(self.probs[(i, j)]);
        }
        out
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Demographic parity gap over the first `K − 1` classes.
pub fn dp_gap(gp: &GroupedPredictions<'_>) -> Result<f64> {
    gp.require_both_groups()?;
    let gaps: Vec<f64> = (0..gp.k() - 1)
        .map(|j| {
            let [g0, g1] = gp.column_by_group(j);
            mean(&g1) - mean(&g0)
        })
        .collect();
    Ok(rms(&gaps) * 100.0)
}

/// True-positive-rate gap over all `K` classes, with the classes skipped
/// because one group has no positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TprGap {
    pub value: f64,
    pub skipped: Vec<usize>,
}

pub fn tpr_gap(gp: &GroupedPredictions<'_>) -> Result<TprGap> {
    gp.require_both_groups()?;
    let labels = gp
        .labels
        .ok_or_else(|| SfpError::Metric("TPR gap needs true labels".into()))?;
    let pred = crate::data::argmax_rows(gp.probs);
    let k = gp.k();
    let mut pos = vec![[0usize; 2]; k];
    let mut hit = vec![[0usize; 2]; k];
    for i in 0..labels.len() {
        let (y, g) = (labels[i], gp.z[i]);
        if y >= k {
            return Err(SfpError::Input(format!("label {y} out of range for {k} classes")));
        }
        pos[y][g] += 1;
        hit[y][g] += (pred[i] == y) as usize;
    }
    let mut gaps = Vec::new();
    let mut skipped = Vec::new();
    for j in 0..k {
        if pos[j][0] == 0 || pos[j][1] == 0 {
            skipped.push(j);
            continue;
        }
        let t0 = hit[j][0] as f64 / pos[j][0] as f64;
        let t1 = hit[j][1] as f64 / pos[j][1] as f64;
        gaps.push(t1 - t0);
    }
    if gaps.is_empty() {
        return Err(SfpError::Metric("no class has positives in both groups".into()));
    }
    Ok(TprGap {
        value: rms(&gaps) * 100.0,
        skipped,
    })
}

/// Exact two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// Maximum CDF discrepancy of predicted probabilities over the first `K − 1` classes.
pub fn mcdp(gp: &GroupedPredictions<'_>) -> Result<f64> {
    gp.require_both_groups()?;
    let vals: Vec<f64> = (0..gp.k() - 1)
        .map(|j| {
            let [g0, g1] = gp.column_by_group(j);
            ks_statistic(&g0, &g1)
        })
        .collect();
    Ok(rms(&vals) * 100.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn row_distance(f: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..f.ncols() {
        let d = f[(i, c)] - f[(j, c)];
        s += d * d;
    }
    s.sqrt()
}

/// Rows kept when capping at `cap` samples (all rows if `n ≤ cap`).
fn capped_rows(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut idx = sample(&mut rng::seeded(seed), n, cap).into_vec();
    idx.sort_unstable();
    idx
}

/// Squared distance covariance V-statistic between the rows of `f` (Euclidean)
/// and a 0/1 attribute, subsampled to `cap` rows with `seed` when larger.
pub fn dcov2(f: &DMatrix<f64>, z: &[usize], cap: usize, seed: u64) -> Result<f64> {
    if f.nrows() != z.len() {
        return Err(SfpError::Dimension("dcov2: length mismatch".into()));
    }
    if f.nrows() < 2 {
        return Err(SfpError::Input("dcov2 needs at least two samples".into()));
    }
    let rows = capped_rows(f.nrows(), cap.max(2), seed);
    let n = rows.len();
    // per-row sums: (Σ_j a_ij b_ij, Σ_j a_ij, Σ_j b_ij)
    let sums: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|a| {
            let i = rows[a];
            let mut s = (0.0, 0.0, 0.0);
            for &j in &rows {
                let d = row_distance(f, i, j);
                let b = (z[i] != z[j]) as u8 as f64;
                s.0 += d * b;
                s.1 += d;
                s.2 += b;
            }
            s
        })
        .collect();
    let nf = n as f64;
    let (mut s1, mut asum, mut bsum, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for &(ab, a, b) in &sums {
        s1 += ab;
        asum += a;
        bsum += b;
        s3 += (a / nf) * (b / nf);
    }
    let s1 = s1 / (nf * nf);
    let s2 = (asum / (nf * nf)) * (bsum / (nf * nf));
    let s3 = s3 / nf;
    Ok(s1 + s2 - 2.0 * s3)
}

/// Mean pairwise distances for a binary split: cross-group, within each
/// group, and over all pairs (all including the zero diagonal where relevant).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDistances {
    pub p1: f64,
    pub cross: f64,
    pub within0: f64,
    pub within1: f64,
    pub overall: f64,
}

/// Mean pairwise distances for binary `z` over all rows (no subsampling).
pub fn pair_distances(f: &DMatrix<f64>, z: &[usize]) -> Result<PairDistances> {
    let n = f.nrows();
    if n != z.len() {
        return Err(SfpError::Dimension("pair_distances: length mismatch".into()));
    }
    let n1 = z.iter().filter(|&&v| v == 1).count();
    let n0 = n - n1;
    if n0 == 0 || n1 == 0 {
        return Err(SfpError::Metric("both sensitive groups must be present".into()));
    }
    let mut tot = [[0.0; 2]; 2];
    for i in 0..n {
        for j in 0..n {
            tot[z[i]][z[j]] += row_distance(f, i, j);
        }
    }
    let (n0f, n1f) = (n0 as f64, n1 as f64);
    Ok(PairDistances {
        p1: n1f / n as f64,
        cross: tot[0][1] / (n0f * n1f),
        within0: tot[0][0] / (n0f * n0f),
        within1: tot[1][1] / (n1f * n1f),
        overall: (tot[0][0] + tot[1][1] + 2.0 * tot[0][1]) / (n as f64 * n as f64),
    })
}

/// Exact binary-attribute form of the distance covariance V-statistic:
/// `2p²(1−p)²(2·cross − within₀ − within₁)`.
pub fn dcov2_binary(d: &PairDistances) -> f64 {
    let q = d.p1 * (1.0 - d.p1);
    2.0 * q * q * (2.0 * d.cross - d.within0 - d.within1)
}

/// The textbook expression `2p(1−p)(cross − overall)`. It agrees with the
/// V-statistic when `p = 1/2` or when `p·(cross − within₁) = (1−p)·(cross − within₀)`,
/// but not in general.
pub fn dcov2_binary_textbook(d: &PairDistances) -> f64 {
    2.0 * d.p1 * (1.0 - d.p1) * (d.cross - d.overall)
}

/// Exact 1-D Wasserstein-1 distance: `∫ |F_a − F_b|` on the merged grid.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = a.iter().chain(&b).copied().collect();
    grid.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    for w in grid.windows(2) {
        let x = w[0];
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        total += (i as f64 / na - j as f64 / nb).abs() * (w[1] - w[0]);
    }
    total
}

/// Mean over columns of the W₁ distance between the two groups.
pub fn mean_group_wasserstein(x: &DMatrix<f64>, z: &[usize]) -> f64 {
    let p = x.ncols();
    if p == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..p {
        let (mut g0, mut g1) = (Vec::new(), Vec::new());
        for (i, &g) in z.iter().enumerate() {
            if g == 1 {
                g1.push(x[(i, j)]);
            } else {
                g0.push(x[(i, j)]);
            }
        }
        total += wasserstein1(&g0, &g1);
    }
    total / p as f64
}

/// Fisher discriminant direction `(S_w + ridge)^{-1}(μ₁ − μ₀)`, unit length,
/// oriented so that group 1 projects higher.
pub fn lda_direction(x: &DMatrix<f64>, z: &[usize]) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if z.len() != n {
        return Err(SfpError::Dimension("lda_direction: length mismatch".into()));
    }
    let groups: [Vec<usize>; 2] = [
        (0..n).filter(|&i| z[i] == 0).collect(),
        (0..n).filter(|&i| z[i] == 1).collect(),
    ];
    if groups.iter().any(|g| g.len() < 2) {
        return Err(SfpError::Metric("each group needs at least two samples".into()));
    }
    let mut means = [DVector::zeros(p), DVector::zeros(p)];
    let mut sw = DMatrix::<f64>::zeros(p, p);
    for (g, rows) in groups.iter().enumerate() {
        for &i in rows {
            means[g] += x.row(i).transpose();
        }
        means[g] /= rows.len() as f64;
        for &i in rows {
            let d = x.row(i).transpose() - &means[g];
            sw += &d * d.transpose();
        }
    }
    sw /= (n - 2) as f64;
    let diff = &means[1] - &means[0];
    let shift = DEFAULT_RIDGE * (sw.trace() / p as f64).max(f64::MIN_POSITIVE);
    for i in 0..p {
        sw[(i, i)] += shift;
    }
    let w = match sw.clone().cholesky() {
        Some(c) => c.solve(&diff),
        None => crate::linalg::pinv_sym(&crate::linalg::SymMatrix::new(sw)?, 1e-12) * &diff,
    };
    let norm = w.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        let mut e = DVector::zeros(p);
        e[0] = 1.0;
        return Ok(e);
    }
    let w = w / norm;
    Ok(if w.dot(&diff) < 0.0 { -w } else { w })
}

/// W₁ between groups after projecting onto the LDA direction.
pub fn lda_wasserstein(x: &DMatrix<f64>, z: &[usize]) -> Result<f64> {
    let w = lda_direction(x, z)?;
    let proj = x * w;
    let (mut g0, mut g1) = (Vec::new(), Vec::new());
    for (i, &g) in z.iter().enumerate() {
        if g == 1 {
            g1.push(proj[i]);
        } else {
            g0.push(proj[i]);
        }
    }
    Ok(wasserstein1(&g0, &g1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn dp_hand_case() {
        let probs = DMatrix::from_row_slice(4, 2, &[0.5, 0.5, 0.5, 0.5, 0.7, 0.3, 0.7, 0.3]);
        let z = [0, 0, 1, 1];
        let gp = GroupedPredictions::new(&probs, None, &z).unwrap();
        assert!((dp_gap(&gp).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn tpr_hand_case() {
        // class 1: group1 TPR 0.9, group0 TPR 0.8; class 0 perfect in both
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        let mut z = Vec::new();
        for g in 0..2 {
            let hits = if g == 1 { 9 } else { 8 };
            for i in 0..10 {
                labels.push(1);
                z.push(g);
                probs.extend(if i < hits { [0.2, 0.8] } else { [0.8, 0.2] });
            }
            for _ in 0..5 {
                labels.push(0);
                z.push(g);
                probs.extend([0.9, 0.1]);
            }
        }
        let probs = DMatrix::from_row_slice(z.len(), 2, &probs);
        let gp = GroupedPredictions::new(&probs, Some(&labels), &z).unwrap();
        let t = tpr_gap(&gp).unwrap();
        assert!((t.value - (0.01f64 / 2.0).sqrt() * 100.0).abs() < 1e-9);
        assert!(t.skipped.is_empty());
    }

    #[test]
    fn mcdp_disjoint_supports() {
        let probs = DMatrix::from_row_slice(4, 2, &[0.2, 0.8, 0.2, 0.8, 0.8, 0.2, 0.8, 0.2]);
        let z = [0, 0, 1, 1];
        let gp = GroupedPredictions::new(&probs, None, &z).unwrap();
        assert!((mcdp(&gp).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn single_group_is_metric_error() {
        let probs = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.4, 0.6]);
        let z = [1, 1];
        let gp = GroupedPredictions::new(&probs, None, &z).unwrap();
        assert!(matches!(dp_gap(&gp), Err(SfpError::Metric(_))));
        assert!(matches!(mcdp(&gp), Err(SfpError::Metric(_))));
    }

    #[test]
    fn ks_matches_brute_force() {
        let mut r = rng::seeded(4);
        for _ in 0..20 {
            let a: Vec<f64> = (0..7).map(|_| (r.random_range(0..5) as f64) / 4.0).collect();
            let b: Vec<f64> = (0..9).map(|_| (r.random_range(0..5) as f64) / 4.0).collect();
            let mut brute: f64 = 0.0;
            for &t in a.iter().chain(&b) {
                let fa = a.iter().filter(|&&v| v <= t).count() as f64 / 7.0;
                let fb = b.iter().filter(|&&v| v <= t).count() as f64 / 9.0;
                brute = brute.max((fa - fb).abs());
            }
            assert!((ks_statistic(&a, &b) - brute).abs() < 1e-15);
        }
    }

    #[test]
    fn dcov_constant_and_indicator() {
        let z: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let f = DMatrix::from_element(200, 1, 3.0);
        assert!(dcov2(&f, &z, DCOV_CAP, 0).unwrap().abs() < 1e-14);
        let f = DMatrix::from_fn(200, 1, |i, _| z[i] as f64);
        assert!((dcov2(&f, &z, DCOV_CAP, 0).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn dcov_matches_double_loop_and_binary_form() {
        let mut r = rng::seeded(11);
        for trial in 0..5 {
            let n = 40 + trial;
            let f = DMatrix::from_fn(n, 2, |_, _| r.random::<f64>());
            let z: Vec<usize> = (0..n).map(|_| r.random_bool(0.3) as usize).collect();
            let v = dcov2(&f, &z, DCOV_CAP, 0).unwrap();
            // direct double-centering oracle
            let a = DMatrix::from_fn(n, n, |i, j| row_distance(&f, i, j));
            let b = DMatrix::from_fn(n, n, |i, j| (z[i] != z[j]) as u8 as f64);
            let center = |m: &DMatrix<f64>| {
                let rm = DVector::from_fn(n, |i, _| m.row(i).mean());
                let gm = m.mean();
                DMatrix::from_fn(n, n, |i, j| m[(i, j)] - rm[i] - rm[j] + gm)
            };
            let oracle = center(&a).component_mul(&center(&b)).mean();
            assert!((v - oracle).abs() < 1e-12);
            let d = pair_distances(&f, &z).unwrap();
            assert!((dcov2_binary(&d) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn wasserstein_cases() {
        let a = [0.3, 1.0, -2.0];
        assert_eq!(wasserstein1(&a, &a), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 1.5).collect();
        assert!((wasserstein1(&a, &b) - 1.5).abs() < 1e-12);
        // equal sizes: sorted matching is optimal
        let mut r = rng::seeded(2);
        let a: Vec<f64> = (0..20).map(|_| r.random()).collect();
        let b: Vec<f64> = (0..20).map(|_| r.random::<f64>() * 2.0).collect();
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let oracle = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 20.0;
        assert!((wasserstein1(&a, &b) - oracle).abs() < 1e-12);
    }

    #[test]
    fn lda_finds_separating_axis() {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng::seeded(6);
        let n = 2000;
        let z: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = DMatrix::from_fn(n, 4, |i, j| {
            let e: f64 = StandardNormal.sample(&mut r);
            e + if j == 0 { 2.0 * z[i] as f64 } else { 0.0 }
        });
        let w = lda_direction(&x, &z).unwrap();
        assert!(w[0].abs() > 0.99);
        assert!(w[0] > 0.0);
    }
}
