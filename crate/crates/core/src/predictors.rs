//! Least squares and multinomial logistic regression with analytic
//! per-sample gradients and Hessians.
//!
//! Both models use an augmented parameter matrix whose first row is the
//! intercept and whose remaining `p` rows multiply the features. Parameter
//! vectors are that matrix flattened column by column.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfpError};
use crate::linalg::{pinv_sym, SymMatrix};

/// Relative ridge for the least-squares normal equations.
pub const LINEAR_RIDGE: f64 = 1e-10;

/// Convergence summary of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FitReport {
    pub iterations: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Multi-output affine model `x ↦ θᵀx + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `p × K`.
    #[serde(with = "crate::data::report::matrix")]
    pub theta: DMatrix<f64>,
    pub intercept: Vec<f64>,
}

/// Multinomial logistic model; the last class has its column pinned to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    /// `(p + 1) × K`, intercept in row 0.
    #[serde(with = "crate::data::report::matrix")]
    pub weights: DMatrix<f64>,
    pub l2: f64,
}

/// Either fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Model {
    Linear(LinearModel),
    Softmax(SoftmaxModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Softmax,
}

fn augment(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

impl LinearModel {
    pub fn zeros(p: usize, k: usize) -> Self {
        Self {
            theta: DMatrix::zeros(p, k),
            intercept: vec![0.0; k],
        }
    }

    /// `(p + 1) × K` with the intercept in row 0.
    pub fn augmented(&self) -> DMatrix<f64> {
        let (p, k) = self.theta.shape();
        DMatrix::from_fn(p + 1, k, |i, j| {
            if i == 0 {
                self.intercept[j]
            } else {
                self.theta[(i - 1, j)]
            }
        })
    }

    pub fn from_augmented(w: &DMatrix<f64>) -> Self {
        Self {
            theta: w.rows(1, w.nrows() - 1).into_owned(),
            intercept: w.row(0).iter().copied().collect(),
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * &self.theta;
        for mut row in out.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.intercept) {
                *v += b;
            }
        }
        out
    }
}

impl SoftmaxModel {
    pub fn zeros(p: usize, k: usize) -> Self {
        Self {
            weights: DMatrix::zeros(p + 1, k),
            l2: 0.0,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.ncols()
    }

    /// Feature weights without the intercept row, `p × K`.
    pub fn coefficients(&self) -> DMatrix<f64> {
        self.weights.rows(1, self.weights.nrows() - 1).into_owned()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        softmax_rows(&(augment(x) * &self.weights))
    }
}

impl Model {
    /// Linear predictions or class probabilities.
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Model::Linear(m) => m.predict(x),
            Model::Softmax(m) => m.predict(x),
        }
    }

    /// Feature coefficients (intercepts excluded), `p × K`.
    pub fn coefficients(&self) -> DMatrix<f64> {
        match self {
            Model::Linear(m) => m.theta.clone(),
            Model::Softmax(m) => m.coefficients(),
        }
    }

    /// `‖θ_a − θ_b‖_F` over feature coefficients only.
    pub fn param_distance(&self, other: &Model) -> f64 {
        (self.coefficients() - other.coefficients()).norm()
    }

    /// Free parameters flattened column-major from the augmented matrix.
    pub fn params(&self) -> DVector<f64> {
        match self {
            Model::Linear(m) => DVector::from_column_slice(m.augmented().as_slice()),
            Model::Softmax(m) => {
                let k = m.n_classes();
                let free = m.weights.columns(0, k - 1).into_owned();
                DVector::from_column_slice(free.as_slice())
            }
        }
    }

    /// Per-sample gradient and Hessian of the training objective with
    /// respect to [`Model::params`]. For the softmax model the L2 term is
    /// spread evenly so that averaging over samples recovers the objective.
    pub fn loss_grad_hess(&self, x: &[f64], y: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            Model::Linear(m) => linear_grad_hess(m, x, y),
            Model::Softmax(m) => softmax_grad_hess(m, x, y),
        }
    }
}

/// Row-wise softmax, numerically stabilized.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Least squares with an intercept through the centered normal equations,
/// with a ridge of `1e-10·tr(XᵀX)/p` against rank deficiency.
pub fn fit_linear(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(LinearModel, FitReport)> {
    let (n, p) = x.shape();
    let k = y.ncols();
    if n == 0 || y.nrows() != n {
        return Err(SfpError::Input(format!(
            "fit_linear needs matching non-empty inputs (x {n} rows, y {} rows)",
            y.nrows()
        )));
    }
    let xm = crate::data::column_means(x);
    let ym = crate::data::column_means(y);
    let xc = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - xm[j]);
    let yc = DMatrix::from_fn(n, k, |i, j| y[(i, j)] - ym[j]);
    let mut gram = xc.transpose() * &xc;
    let rhs = xc.transpose() * &yc;
    let ridge = if p > 0 { LINEAR_RIDGE * gram.trace() / p as f64 } else { 0.0 };
    for i in 0..p {
        gram[(i, i)] += ridge;
    }
    let theta = if ridge > 0.0 {
        match gram.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => pinv_sym(&SymMatrix::new(gram)?, 1e-14) * &rhs,
        }
    } else {
        DMatrix::zeros(p, k)
    };
    let intercept: Vec<f64> = (0..k).map(|j| ym[j] - (xm.transpose() * theta.column(j))[0]).collect();
    let model = LinearModel { theta, intercept };
    let resid = y - model.predict(x);
    let objective = 0.5 * resid.norm_squared() / n as f64;
    let grad_norm = (augment(x).transpose() * &resid).amax() / n as f64;
    Ok((
        model,
        FitReport {
            iterations: 1,
            objective,
            grad_norm,
            converged: true,
        },
    ))
}

fn linear_grad_hess(m: &LinearModel, x: &[f64], y: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let p = x.len();
    let k = y.len();
    let xa = DVector::from_fn(p + 1, |i, _| if i == 0 { 1.0 } else { x[i - 1] });
    let w = m.augmented();
    let resid = DVector::from_column_slice(y) - w.transpose() * &xa;
    let d = p + 1;
    let mut g = DVector::zeros(d * k);
    let mut h = DMatrix::zeros(d * k, d * k);
    let xx = &xa * xa.transpose();
    for c in 0..k {
        for i in 0..d {
            g[c * d + i] = -xa[i] * resid[c];
        }
        h.view_mut((c * d, c * d), (d, d)).copy_from(&xx);
    }
    (g, h)
}

/// Settings for [`fit_softmax`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxOptions {
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SoftmaxOptions {
    fn default() -> Self {
        Self {
            l2: 0.0,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

struct SoftmaxProblem<'a> {
    xa: DMatrix<f64>,
    labels: &'a [usize],
    k: usize,
    l2: f64,
}

impl SoftmaxProblem<'_> {
    fn d(&self) -> usize {
        self.xa.ncols()
    }

    fn weights(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let d = self.d();
        let mut w = DMatrix::zeros(d, self.k);
        for c in 0..self.k - 1 {
            for i in 0..d {
                w[(i, c)] = v[c * d + i];
            }
        }
        w
    }

    fn penalty(&self, v: &DVector<f64>) -> f64 {
        let d = self.d();
        let mut s = 0.0;
        for c in 0..self.k - 1 {
            for i in 1..d {
                s += v[c * d + i] * v[c * d + i];
            }
        }
        0.5 * self.l2 * s
    }

    fn objective(&self, v: &DVector<f64>) -> f64 {
        let logits = &self.xa * self.weights(v);
        let n = self.labels.len();
        let mut ce = 0.0;
        for i in 0..n {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            ce += lse - row[self.labels[i]];
        }
        ce / n as f64 + self.penalty(v)
    }

    fn grad_hess(&self, v: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.labels.len() as f64;
        let d = self.d();
        let kf = self.k - 1;
        let probs = softmax_rows(&(&self.xa * self.weights(v)));
        let mut g = DVector::zeros(d * kf);
        let mut h = DMatrix::zeros(d * kf, d * kf);
        for a in 0..kf {
            let resid = DVector::from_fn(self.labels.len(), |i, _| {
                probs[(i, a)] - (self.labels[i] == a) as u8 as f64
            });
            let ga = self.xa.transpose() * resid / n;
            g.rows_mut(a * d, d).copy_from(&ga);
            for b in a..kf {
                let wts = DVector::from_fn(self.labels.len(), |i, _| {
                    let pa = probs[(i, a)];
                    let pb = probs[(i, b)];
                    (if a == b { pa } else { 0.0 } - pa * pb) / n
                });
                let scaled = DMatrix::from_fn(self.xa.nrows(), d, |i, j| self.xa[(i, j)] * wts[i]);
                let block = self.xa.transpose() * scaled;
                h.view_mut((a * d, b * d), (d, d)).copy_from(&block);
                if a != b {
                    h.view_mut((b * d, a * d), (d, d)).copy_from(&block.transpose());
                }
            }
        }
        for a in 0..kf {
            for i in 1..d {
                g[a * d + i] += self.l2 * v[a * d + i];
                h[(a * d + i, a * d + i)] += self.l2;
            }
        }
        (g, h)
    }
}

fn newton_step(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    if let Some(c) = h.clone().cholesky() {
        return c.solve(g);
    }
    let dim = h.nrows();
    let jitter = 1e-10 * (h.trace() / dim as f64).max(1e-300);
    let mut hj = h.clone();
    for i in 0..dim {
        hj[(i, i)] += jitter;
    }
    match hj.clone().cholesky() {
        Some(c) => c.solve(g),
        None => match SymMatrix::new(hj) {
            Ok(s) => pinv_sym(&s, 1e-12) * g,
            Err(_) => g.clone(),
        },
    }
}

/// Multinomial logistic regression by damped Newton from zero weights.
///
/// Minimizes mean cross-entropy plus `(l2/2)‖W‖²` on non-intercept weights.
/// Steps are halved until the objective decreases. Perfect separation with
/// `l2 = 0` ends with `converged = false` rather than an error.
pub fn fit_softmax(
    x: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    opts: &SoftmaxOptions,
) -> Result<(SoftmaxModel, FitReport)> {
    let n = x.nrows();
    if labels.len() != n || n == 0 {
        return Err(SfpError::Input("fit_softmax needs one label per non-empty row".into()));
    }
    if n_classes < 2 || labels.iter().any(|&l| l >= n_classes) {
        return Err(SfpError::Input(format!(
            "labels must lie in 0..{n_classes} with at least two classes"
        )));
    }
    let mut present = vec![false; n_classes];
    for &l in labels {
        present[l] = true;
    }
    if present.iter().filter(|&&b| b).count() < 2 {
        return Err(SfpError::Input("at least two classes must be present".into()));
    }
    let prob = SoftmaxProblem {
        xa: augment(x),
        labels,
        k: n_classes,
        l2: opts.l2,
    };
    let mut v = DVector::zeros(prob.d() * (n_classes - 1));
    let mut obj = prob.objective(&v);
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;
    while iterations < opts.max_iter {
        let (g, h) = prob.grad_hess(&v);
        grad_norm = g.amax();
        if grad_norm <= opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let step = newton_step(&h, &g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &v - &step * t;
            let c_obj = prob.objective(&cand);
            if c_obj.is_finite() && c_obj < obj {
                v = cand;
                obj = c_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        let (g, _) = prob.grad_hess(&v);
        grad_norm = g.amax();
        converged = grad_norm <= opts.tol;
    }
    let model = SoftmaxModel {
        weights: prob.weights(&v),
        l2: opts.l2,
    };
    Ok((
        model,
        FitReport {
            iterations,
            objective: obj,
            grad_norm,
            converged,
        },
    ))
}

fn softmax_grad_hess(m: &SoftmaxModel, x: &[f64], y: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let d = x.len() + 1;
    let k = m.n_classes();
    let kf = k - 1;
    let xa = DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { x[i - 1] });
    let logits = DMatrix::from_row_slice(1, k, (m.weights.transpose() * &xa).as_slice());
    let probs = softmax_rows(&logits);
    let mut g = DVector::zeros(d * kf);
    let mut h = DMatrix::zeros(d * kf, d * kf);
    let xx = &xa * xa.transpose();
    for a in 0..kf {
        let r = probs[(0, a)] - y[a];
        for i in 0..d {
            g[a * d + i] = xa[i] * r;
        }
        for b in 0..kf {
            let c = if a == b { probs[(0, a)] } else { 0.0 } - probs[(0, a)] * probs[(0, b)];
            h.view_mut((a * d, b * d), (d, d)).copy_from(&(&xx * c));
        }
        for i in 1..d {
            g[a * d + i] += m.l2 * m.weights[(i, a)];
            h[(a * d + i, a * d + i)] += m.l2;
        }
    }
    (g, h)
}

/// Fits the given model kind. `y` is `n × K` (one-hot for the softmax model).
pub fn fit(kind: ModelKind, x: &DMatrix<f64>, y: &DMatrix<f64>, opts: &SoftmaxOptions) -> Result<(Model, FitReport)> {
    match kind {
        ModelKind::Linear => fit_linear(x, y).map(|(m, r)| (Model::Linear(m), r)),
        ModelKind::Softmax => {
            let labels = crate::data::argmax_rows(y);
            fit_softmax(x, &labels, y.ncols(), opts).map(|(m, r)| (Model::Softmax(m), r))
        }
    }
}

/// Regression and classification utility, overall and by group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Utility {
    pub rmse: Option<f64>,
    pub rmse_by_group: [Option<f64>; 2],
    pub rmse_gap: Option<f64>,
    /// Percent.
    pub accuracy: Option<f64>,
    pub accuracy_by_group: [Option<f64>; 2],
}

/// RMSE over all entries and per group, or accuracy by argmax when
/// `classification` is set.
pub fn utility_metrics(pred: &DMatrix<f64>, truth: &DMatrix<f64>, z: &[usize], classification: bool) -> Result<Utility> {
    let n = pred.nrows();
    if truth.shape() != pred.shape() || z.len() != n {
        return Err(SfpError::Dimension("utility_metrics: shape mismatch".into()));
    }
    let mut u = Utility::default();
    if classification {
        let pl = crate::data::argmax_rows(pred);
        let tl = crate::data::argmax_rows(truth);
        let mut hit = [0usize; 2];
        let mut cnt = [0usize; 2];
        for i in 0..n {
            cnt[z[i]] += 1;
            hit[z[i]] += (pl[i] == tl[i]) as usize;
        }
        if n > 0 {
            u.accuracy = Some(100.0 * (hit[0] + hit[1]) as f64 / n as f64);
        }
        for g in 0..2 {
            if cnt[g] > 0 {
                u.accuracy_by_group[g] = Some(100.0 * hit[g] as f64 / cnt[g] as f64);
            }
        }
    } else {
        let k = pred.ncols() as f64;
        let mut sse = [0.0; 2];
        let mut cnt = [0usize; 2];
        for i in 0..n {
            let e: f64 = (pred.row(i) - truth.row(i)).norm_squared();
            sse[z[i]] += e;
            cnt[z[i]] += 1;
        }
        if n > 0 {
            u.rmse = Some(((sse[0] + sse[1]) / (n as f64 * k)).sqrt());
        }
        for g in 0..2 {
            if cnt[g] > 0 {
                u.rmse_by_group[g] = Some((sse[g] / (cnt[g] as f64 * k)).sqrt());
            }
        }
        if let [Some(a), Some(b)] = u.rmse_by_group {
            u.rmse_gap = Some((b - a).abs());
        }
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::seeded(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut r))
    }

    #[test]
    fn linear_exact_recovery() {
        let x = gaussian(50, 4, 1);
        let theta = DMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64 - 1.5);
        let y = &x * &theta;
        let (m, _) = fit_linear(&x, &y).unwrap();
        assert!((m.theta - theta).amax() < 1e-8);
        assert!(m.intercept.iter().all(|b| b.abs() < 1e-8));
    }

    #[test]
    fn linear_rank_deficient_matches_pinv() {
        let x = gaussian(100, 5, 2);
        let mut p = DMatrix::<f64>::zeros(5, 5);
        p[(0, 0)] = 1.0;
        p[(1, 1)] = 1.0;
        let xp = &x * &p;
        let y = gaussian(100, 2, 3) + &x * DMatrix::from_element(5, 2, 1.0);
        let (m, _) = fit_linear(&xp, &y).unwrap();
        let xa = augment(&xp);
        let g = SymMatrix::new(xa.transpose() * &xa).unwrap();
        let w = pinv_sym(&g, 1e-12) * xa.transpose() * &y;
        let oracle = &xa * w;
        assert!((m.predict(&xp) - oracle).amax() < 1e-6);
    }

    #[test]
    fn linear_residuals_orthogonal() {
        let x = gaussian(200, 3, 4);
        let y = gaussian(200, 2, 5);
        let (m, rep) = fit_linear(&x, &y).unwrap();
        let r = &y - m.predict(&x);
        assert!((x.transpose() * r).amax() <= 1e-6 * 200.0);
        assert!(rep.grad_norm < 1e-8);
    }

    #[test]
    fn softmax_separable_and_null() {
        let n = 200;
        let x = gaussian(n, 2, 7);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let xs = DMatrix::from_fn(n, 2, |i, j| x[(i, j)] * 0.5 + if j == 0 { 6.0 * labels[i] as f64 } else { 0.0 });
        let opts = SoftmaxOptions { l2: 1e-3, ..Default::default() };
        let (m, rep) = fit_softmax(&xs, &labels, 2, &opts).unwrap();
        assert!(rep.converged);
        let pred = crate::data::argmax_rows(&m.predict(&xs));
        assert_eq!(pred, labels);

        // unpenalized separation: flagged, not an error
        let (_, rep) = fit_softmax(&xs, &labels, 2, &SoftmaxOptions::default()).unwrap();
        assert!(!rep.converged || rep.grad_norm <= 1e-8);

        // labels independent of features: probabilities near class frequencies
        let mut r = rng::seeded(8);
        let noise = gaussian(4000, 2, 9) * 1e-3;
        let lab: Vec<usize> = (0..4000).map(|_| (r.random::<f64>() < 0.3) as usize).collect();
        let (m, _) = fit_softmax(&noise, &lab, 2, &SoftmaxOptions::default()).unwrap();
        let freq = lab.iter().sum::<usize>() as f64 / 4000.0;
        let probs = m.predict(&noise);
        let mean = probs.column(1).mean();
        assert!((mean - freq).abs() < 1e-3);
        assert!(probs.column(1).iter().all(|v| (v - freq).abs() < 0.05));
    }

    #[test]
    fn predict_trivial_cases() {
        let x = gaussian(5, 3, 1);
        let m = SoftmaxModel::zeros(3, 4);
        assert!(m.predict(&x).iter().all(|v| (v - 0.25).abs() < 1e-15));
        let lm = LinearModel {
            theta: DMatrix::zeros(3, 2),
            intercept: vec![1.0, -2.0],
        };
        let out = lm.predict(&x);
        assert!(out.column(0).iter().all(|&v| v == 1.0));
        let w = gaussian(4, 3, 2) * 3.0;
        let sm = SoftmaxModel { weights: w, l2: 0.0 };
        let pr = sm.predict(&gaussian(20, 3, 3));
        for i in 0..20 {
            assert!((pr.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    fn fd_check(model: &Model, x: &[f64], y: &[f64], rebuild: impl Fn(&DVector<f64>) -> Model) {
        let (g, h) = model.loss_grad_hess(x, y);
        let v = model.params();
        let h_eps = 1e-6;
        let loss = |m: &Model| -> f64 {
            match m {
                Model::Linear(lm) => {
                    let pr = lm.predict(&DMatrix::from_row_slice(1, x.len(), x));
                    0.5 * pr.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                }
                Model::Softmax(sm) => {
                    let pr = sm.predict(&DMatrix::from_row_slice(1, x.len(), x));
                    let c = y.iter().position(|&v| v == 1.0).unwrap();
                    let pen: f64 = sm.coefficients().norm_squared() * sm.l2 / 2.0;
                    -pr[(0, c)].ln() + pen
                }
            }
        };
        let grad = |m: &Model| m.loss_grad_hess(x, y).0;
        for i in 0..v.len() {
            let mut vp = v.clone();
            vp[i] += h_eps;
            let mut vm = v.clone();
            vm[i] -= h_eps;
            let fd = (loss(&rebuild(&vp)) - loss(&rebuild(&vm))) / (2.0 * h_eps);
            assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "grad {i}: {fd} vs {}", g[i]);
            let fdh = (grad(&rebuild(&vp)) - grad(&rebuild(&vm))) / (2.0 * h_eps);
            for j in 0..v.len() {
                assert!((fdh[j] - h[(j, i)]).abs() <= 1e-5 * h[(j, i)].abs().max(1.0));
            }
        }
        assert!((&h - h.transpose()).amax() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = [0.3, -1.2, 0.7];
        let lm = Model::Linear(LinearModel {
            theta: gaussian(3, 2, 4),
            intercept: vec![0.1, -0.4],
        });
        fd_check(&lm, &x, &[1.0, 2.0], |v| {
            Model::Linear(LinearModel::from_augmented(&DMatrix::from_column_slice(4, 2, v.as_slice())))
        });
        let mut w = gaussian(4, 3, 6);
        w.column_mut(2).fill(0.0);
        let sm = Model::Softmax(SoftmaxModel { weights: w, l2: 0.05 });
        fd_check(&sm, &x, &[0.0, 1.0, 0.0], |v| {
            let mut w = DMatrix::zeros(4, 3);
            w.columns_mut(0, 2).copy_from(&DMatrix::from_column_slice(4, 2, v.as_slice()));
            Model::Softmax(SoftmaxModel { weights: w, l2: 0.05 })
        });
    }

    #[test]
    fn mean_gradient_vanishes_at_optimum() {
        let x = gaussian(300, 3, 10);
        let labels: Vec<usize> = (0..300).map(|i| ((x[(i, 0)] + 0.5 * x[(i, 1)]) > 0.2) as usize + (i % 7 == 0) as usize).collect();
        let (m, _) = fit_softmax(&x, &labels, 3, &SoftmaxOptions { l2: 0.01, ..Default::default() }).unwrap();
        let model = Model::Softmax(m);
        let y = crate::data::one_hot(&labels, 3);
        let mut g = DVector::zeros(model.params().len());
        for i in 0..300 {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let yi: Vec<f64> = y.row(i).iter().copied().collect();
            g += model.loss_grad_hess(&xi, &yi).0;
        }
        assert!((g / 300.0).amax() < 1e-6);
    }

    #[test]
    fn utility_hand_cases() {
        let truth = DMatrix::from_row_slice(4, 1, &[0.0, 0.0, 0.0, 0.0]);
        let pred = DMatrix::from_row_slice(4, 1, &[1.0, -1.0, 3.0, -3.0]);
        let u = utility_metrics(&pred, &truth, &[0, 0, 1, 1], false).unwrap();
        assert_eq!(u.rmse_by_group, [Some(1.0), Some(3.0)]);
        assert_eq!(u.rmse_gap, Some(2.0));
        let u = utility_metrics(&truth, &truth, &[0, 0, 1, 1], false).unwrap();
        assert_eq!(u.rmse, Some(0.0));
        let oh = crate::data::one_hot(&[0, 1, 1], 2);
        let u = utility_metrics(&oh, &oh, &[0, 1, 0], true).unwrap();
        assert_eq!(u.accuracy, Some(100.0));
    }
}
