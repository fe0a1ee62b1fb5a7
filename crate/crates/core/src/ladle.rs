//! Ladle rank estimator: eigenvalue decay plus bootstrap eigenvector variability.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfpError};
use crate::linalg::{sym_eig, SymMatrix};
use crate::rng;

/// Bootstrap and search-range settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadleConfig {
    pub bootstrap: usize,
    pub kmax: usize,
    pub seed: u64,
}

/// Objective components for every candidate rank `0..=kmax`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadleResult {
    pub rank: usize,
    /// Normalized bootstrap eigenvector variability.
    pub variability: Vec<f64>,
    /// Normalized eigenvalue term.
    pub eigen_term: Vec<f64>,
    pub objective: Vec<f64>,
    /// Eigenvalues of the full-data matrix.
    pub eigenvalues: Vec<f64>,
}

/// Default upper search limit for a `p`-dimensional problem.
pub fn default_kmax(p: usize) -> usize {
    p.saturating_sub(2).clamp(1, 12)
}

/// Estimates `rank(M)` where `builder(rows)` computes the candidate from the
/// given row sample. `builder` is called once with `0..n` and once per
/// bootstrap replicate with rows drawn with replacement.
pub fn ladle_rank<F>(builder: F, n: usize, cfg: &LadleConfig) -> Result<LadleResult>
where
    F: Fn(&[usize]) -> Result<SymMatrix> + Sync,
{
    if cfg.bootstrap == 0 {
        return Err(SfpError::Input("ladle needs at least one bootstrap replicate".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let full = builder(&all)?;
    let p = full.dim();
    if cfg.kmax == 0 || cfg.kmax > p {
        return Err(SfpError::Input(format!("kmax {} must be in 1..={p}", cfg.kmax)));
    }
    let kmax = cfg.kmax;
    let eig = sym_eig(&full);
    let mut lambdas: Vec<f64> = eig.values().iter().map(|v| v.max(0.0)).collect();
    lambdas.push(0.0);
    if lambdas.iter().all(|&v| v <= f64::MIN_POSITIVE) {
        return Ok(LadleResult {
            rank: 0,
            variability: vec![0.0; kmax + 1],
            eigen_term: vec![0.0; kmax + 1],
            objective: vec![0.0; kmax + 1],
            eigenvalues: eig.values().to_vec(),
        });
    }

    let boots: Vec<Vec<f64>> = (0..cfg.bootstrap)
        .into_par_iter()
        .map(|b| -> Result<Vec<f64>> {
            let mut r = rng::stream(cfg.seed, b as u64);
            let rows: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            let mb = sym_eig(&builder(&rows)?);
            let mut out = vec![0.0; kmax + 1];
            for (k, slot) in out.iter_mut().enumerate().skip(1) {
                let a = eig.vectors().columns(0, k);
                let bb = mb.vectors().columns(0, k);
                let det = (a.transpose() * bb).determinant();
                *slot = 1.0 - det.abs();
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut f = vec![0.0; kmax + 1];
    for row in &boots {
        for (acc, v) in f.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in f.iter_mut() {
        *v /= cfg.bootstrap as f64;
    }
    let fsum: f64 = f.iter().sum();
    let variability: Vec<f64> = f.iter().map(|v| v / (1.0 + fsum)).collect();
    let lsum: f64 = lambdas[..=kmax].iter().sum();
    let eigen_term: Vec<f64> = (0..=kmax).map(|k| lambdas[k] / (1.0 + lsum)).collect();
    let objective: Vec<f64> = variability
        .iter()
        .zip(&eigen_term)
        .map(|(a, b)| a + b)
        .collect();
    let rank = objective
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (k, &v)| if v < best.1 { (k, v) } else { best })
        .0;
    Ok(LadleResult {
        rank,
        variability,
        eigen_term,
        objective,
        eigenvalues: eig.values().to_vec(),
    })
}
