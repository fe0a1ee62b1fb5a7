//! Python module `sfp`: configuration-driven sweeps plus the fairness metrics.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use sfp_core::data::config::RunConfig;
use sfp_core::data::report::to_versioned_json;
use sfp_core::fairness::{self, GroupedPredictions};
use sfp_core::{pipeline, SfpError};

fn to_py(e: SfpError) -> PyErr {
    match e {
        SfpError::Conditioning(_) | SfpError::DegenerateSpectrum { .. } => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n == 0 || p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

fn config(text: Option<&str>) -> PyResult<RunConfig> {
    match text {
        Some(t) => RunConfig::from_json(t).map_err(to_py),
        None => Ok(RunConfig::default()),
    }
}

/// Generates the configured dataset; returns `(x, y, z)` as nested lists.
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn simulate(config_json: Option<&str>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>)> {
    let cfg = config(config_json)?;
    let ds = cfg.load_dataset().map_err(to_py)?;
    let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    Ok((rows(&ds.x), rows(&ds.y), ds.z))
}

/// Runs the full sweep and returns the report as JSON text.
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn sweep(py: Python<'_>, config_json: Option<&str>) -> PyResult<String> {
    let cfg = config(config_json)?;
    py.detach(|| {
        let ds = cfg.load_dataset()?;
        let report = pipeline::run(&cfg, &ds)?;
        to_versioned_json(&report)
    })
    .map_err(to_py)
}

/// Squared distance covariance between rows of `f` and a binary group.
#[pyfunction]
#[pyo3(signature = (f, z, cap=fairness::DCOV_CAP, seed=0))]
fn dcov2(f: Vec<Vec<f64>>, z: Vec<usize>, cap: usize, seed: u64) -> PyResult<f64> {
    fairness::dcov2(&matrix(f)?, &z, cap, seed).map_err(to_py)
}

/// Demographic-parity gap of class probabilities.
#[pyfunction]
fn dp_gap(probs: Vec<Vec<f64>>, z: Vec<usize>) -> PyResult<f64> {
    let probs = matrix(probs)?;
    let gp = GroupedPredictions::new(&probs, None, &z).map_err(to_py)?;
    fairness::dp_gap(&gp).map_err(to_py)
}

/// Largest Kolmogorov-Smirnov gap between group score distributions.
#[pyfunction]
fn mcdp(probs: Vec<Vec<f64>>, z: Vec<usize>) -> PyResult<f64> {
    let probs = matrix(probs)?;
    let gp = GroupedPredictions::new(&probs, None, &z).map_err(to_py)?;
    fairness::mcdp(&gp).map_err(to_py)
}

#[pyfunction]
fn wasserstein1(a: Vec<f64>, b: Vec<f64>) -> f64 {
    fairness::wasserstein1(&a, &b)
}

#[pymodule]
fn sfp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(dcov2, m)?)?;
    m.add_function(wrap_pyfunction!(dp_gap, m)?)?;
    m.add_function(wrap_pyfunction!(mcdp, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    Ok(())
}
