//! Structural invariants shared by the property tests and the acceptance run.

#![allow(dead_code)]

use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use sfp_core::data::config::Fallback;
use sfp_core::decomposition::{intersection_basis, residual_projection, FairProjectionFamily};
use sfp_core::fairness::{dcov2, dp_gap, mcdp, FairnessMetric, GroupedPredictions};
use sfp_core::linalg::{orthonormalize, projection, subspace_distance, sym_eig, OrthonormalBasis, SymMatrix};
use sfp_core::pipeline::{feasible, select, SelectionRule, Task, TradeoffPoint};
use sfp_core::predictors::{FitReport, Utility};
use sfp_core::rng;

pub fn random_orthonormal(p: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::seeded(seed);
    let g = DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut r));
    g.qr().q().columns(0, k).into_owned()
}

/// `(p, q, r, s)` with `s ≤ min(q, r)` and `q + r − s ≤ p`.
pub fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (3usize..12)
        .prop_flat_map(|p| (Just(p), 1..=p))
        .prop_flat_map(|(p, q)| (Just(p), Just(q), 1..=p))
        .prop_flat_map(|(p, q, r)| {
            let lo = (q + r).saturating_sub(p);
            (Just(p), Just(q), Just(r), lo..=q.min(r))
        })
}

fn family_from(p: usize, d: usize, s: usize, seed: u64) -> FairProjectionFamily {
    let a = random_orthonormal(p, p, seed);
    let unshared = OrthonormalBasis::try_from_columns(a.columns(0, d).into_owned()).unwrap();
    let shared = OrthonormalBasis::try_from_columns(a.columns(d, s).into_owned()).unwrap();
    let sensitive = OrthonormalBasis::try_from_columns(a.columns(d, p - d).into_owned()).unwrap();
    FairProjectionFamily::new(unshared, shared, sensitive)
}

/// Every `P^(m)` is a symmetric idempotent of rank `d + m` and the family is nested.
pub fn projection_family_nested(p: usize, d: usize, s: usize, seed: u64) -> Result<(), TestCaseError> {
    let fam = family_from(p, d, s, seed);
    prop_assert_eq!(fam.s(), s);
    let mut prev: Option<DMatrix<f64>> = None;
    for m in 0..=s {
        let pm = fam.projection(m).unwrap().into_inner();
        prop_assert!((&pm * &pm - &pm).amax() < 1e-10);
        prop_assert!((&pm - pm.transpose()).amax() < 1e-12);
        prop_assert!((pm.trace() - (d + m) as f64).abs() < 1e-10);
        prop_assert_eq!(fam.rank(m), d + m);
        if let Some(lower) = prev {
            prop_assert!((&pm * &lower - &lower).amax() < 1e-10);
        }
        prev = Some(pm);
    }
    prop_assert!(fam.projection(s + 1).is_err());
    Ok(())
}

pub fn projection_family_strategy() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (2usize..12)
        .prop_flat_map(|p| (Just(p), 0..p))
        .prop_flat_map(|(p, d)| (Just(p), Just(d), 0..=(p - d), any::<u64>()))
}

/// With population candidates built from the true directions, the unshared
/// basis lies in `span(Q_z A_Y)` and the shared basis is the intersection.
pub fn oracle_containment(geom: (usize, usize, usize, usize), scales: (f64, f64), seed: u64) -> Result<(), TestCaseError> {
    let (p, q, r, s) = geom;
    let a = random_orthonormal(p, q + r - s, seed);
    let a_y = a.columns(0, q).into_owned();
    let a_z = a.columns(q - s, r).into_owned();
    let m_y = SymMatrix::new(&a_y * a_y.transpose() * scales.0).unwrap();
    let m_z = SymMatrix::new(&a_z * a_z.transpose() * scales.1).unwrap();

    let psi = leading_range(&m_z, scales.1);
    prop_assert_eq!(psi.rank(), r);
    let q_z = residual_projection(&psi);
    let resid = SymMatrix::new(q_z.matrix() * m_y.matrix() * q_z.matrix()).unwrap();
    let b_tilde = leading_range(&resid, scales.0);
    let target = orthonormalize(&(q_z.matrix() * &a_y));
    let outside = (DMatrix::identity(p, p) - projection(&target).into_inner()) * b_tilde.columns();
    prop_assert!(outside.amax() < 1e-8, "containment residual {}", outside.amax());
    prop_assert_eq!(b_tilde.rank(), q - s);

    let phi = intersection_basis(&m_y, &m_z, &SymMatrix::identity(p), s, 0.0).unwrap();
    let truth = OrthonormalBasis::try_from_columns(a.columns(q - s, s).into_owned()).unwrap();
    prop_assert!(subspace_distance(&phi, &truth) < 1e-8);
    Ok(())
}

/// Eigenvectors with eigenvalue above `1e-10·scale`.
fn leading_range(m: &SymMatrix, scale: f64) -> OrthonormalBasis {
    let eig = sym_eig(m);
    let k = eig.values().iter().filter(|&&v| v > 1e-10 * scale).count();
    eig.leading_basis(k)
}

fn random_probs(n: usize, k: usize, r: &mut rng::Rng) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(n, k, |_, _| r.random_range(0.01..1.0));
    for mut row in m.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}

/// DP, MCDP and dCov² vanish when both groups receive the same predictions.
pub fn metric_zero_cases(n0: usize, k: usize, seed: u64) -> Result<(), TestCaseError> {
    let mut r = rng::seeded(seed);
    let half = random_probs(n0, k, &mut r);
    let mut order: Vec<usize> = (0..n0).collect();
    order.shuffle(&mut r);
    let mut probs = DMatrix::zeros(2 * n0, k);
    probs.rows_mut(0, n0).copy_from(&half);
    for (i, &j) in order.iter().enumerate() {
        probs.row_mut(n0 + i).copy_from(&half.row(j));
    }
    let z: Vec<usize> = (0..2 * n0).map(|i| (i >= n0) as usize).collect();
    let gp = GroupedPredictions::new(&probs, None, &z).unwrap();
    prop_assert!(dp_gap(&gp).unwrap().abs() < 1e-10);
    prop_assert!(mcdp(&gp).unwrap().abs() < 1e-12);
    prop_assert!(dcov2(&probs, &z, 4 * n0, seed).unwrap().abs() < 1e-12);

    let constant = DMatrix::from_fn(2 * n0, k, |_, j| if j == 0 { 1.0 } else { 0.0 });
    let zr: Vec<usize> = (0..2 * n0).map(|i| ((i * 7 + seed as usize) % 3 == 0) as usize).collect();
    if zr.contains(&0) && zr.contains(&1) {
        let gp = GroupedPredictions::new(&constant, None, &zr).unwrap();
        prop_assert_eq!(dp_gap(&gp).unwrap(), 0.0);
        prop_assert_eq!(mcdp(&gp).unwrap(), 0.0);
        prop_assert_eq!(dcov2(&constant, &zr, 4 * n0, seed).unwrap(), 0.0);
    }
    Ok(())
}

pub fn point(m: usize, utility: f64, metric: Option<f64>) -> TradeoffPoint {
    TradeoffPoint {
        m,
        rank: m,
        utility: Some(utility),
        detail: Utility::default(),
        dp: metric,
        tpr: metric,
        tpr_skipped: Vec::new(),
        mcdp: metric,
        dcov2: metric,
        param_distance: 0.0,
        wd: 0.0,
        lda_wd: None,
        fit: FitReport::default(),
    }
}

pub fn selection_strategy() -> impl Strategy<Value = (Vec<(f64, Option<u8>)>, f64, f64, bool, bool)> {
    (
        prop::collection::vec((1.0f64..2.0, prop::option::weighted(0.85, 0u8..4)), 1..10),
        1.0f64..2.0,
        0.5f64..1.0,
        any::<bool>(),
        any::<bool>(),
    )
}

/// The selected level is feasible with the smallest metric, ties go to the
/// smaller `m`, and the fallback is used and flagged exactly when nothing is feasible.
pub fn selection_rule(
    raw: Vec<(f64, Option<u8>)>,
    base: f64,
    tau: f64,
    classification: bool,
    best_utility: bool,
) -> Result<(), TestCaseError> {
    let task = if classification { Task::Classification } else { Task::Regression };
    let scale = if classification { 50.0 } else { 1.0 };
    let points: Vec<TradeoffPoint> = raw
        .iter()
        .enumerate()
        .map(|(m, (u, v))| point(m, u * scale, v.map(|v| v as f64 / 10.0)))
        .collect();
    let baseline = point(0, base * scale, None);
    let rule = SelectionRule {
        tau,
        metric: FairnessMetric::Dp,
        fallback: if best_utility { Fallback::BestUtility } else { Fallback::Full },
    };
    let sel = select(&points, Some(&baseline), task, &rule).unwrap();
    let feas: Vec<&TradeoffPoint> = points.iter().filter(|p| feasible(p, Some(&baseline), task, tau)).collect();
    let key = |p: &TradeoffPoint| p.dp.unwrap_or(f64::INFINITY);
    if feas.is_empty() {
        prop_assert!(sel.fallback);
        let expect = if best_utility {
            let better = |a: &TradeoffPoint, b: &TradeoffPoint| {
                if classification {
                    a.utility > b.utility
                } else {
                    a.utility < b.utility
                }
            };
            points.iter().fold(&points[0], |acc, p| if better(p, acc) { p } else { acc }).m
        } else {
            points.len() - 1
        };
        prop_assert_eq!(sel.m, expect);
    } else {
        prop_assert!(!sel.fallback);
        let chosen = &points[sel.m];
        prop_assert!(feasible(chosen, Some(&baseline), task, tau));
        for p in &feas {
            prop_assert!(key(chosen) <= key(p));
            if key(p) == key(chosen) {
                prop_assert!(chosen.m <= p.m);
            }
        }
    }
    Ok(())
}
