//! Model sweep over projection levels and fair-model selection.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::config::{Fallback, RunConfig};
use crate::data::report::tsv_cell;
use crate::data::{Dataset, SplitTag, TargetKind};
use crate::decomposition::{estimate_family, FairProjectionFamily, Target};
use crate::error::{Result, SfpError};
use crate::fairness::{
    dcov2, dp_gap, lda_wasserstein, mcdp, mean_group_wasserstein, tpr_gap, FairnessMetric, GroupedPredictions,
};
use crate::linalg::OrthonormalBasis;
use crate::predictors::{
    fit, utility_metrics, FitReport, LinearModel, Model, ModelKind, SoftmaxModel, SoftmaxOptions, Utility,
};
use crate::rng::derive_seed;

/// Utility floor and fairness criterion used to pick a projection level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRule {
    pub tau: f64,
    pub metric: FairnessMetric,
    pub fallback: Fallback,
}

impl Default for SelectionRule {
    fn default() -> Self {
        Self {
            tau: 0.95,
            metric: FairnessMetric::Mcdp,
            fallback: Fallback::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn of(ds: &Dataset) -> Task {
        match ds.target {
            TargetKind::Continuous => Task::Regression,
            TargetKind::Classes(_) => Task::Classification,
        }
    }

    pub fn default_model(self) -> ModelKind {
        match self {
            Task::Regression => ModelKind::Linear,
            Task::Classification => ModelKind::Softmax,
        }
    }

    pub fn default_metric(self) -> FairnessMetric {
        match self {
            Task::Regression => FairnessMetric::Dcov,
            Task::Classification => FairnessMetric::Mcdp,
        }
    }
}

/// Metrics of one model on one data split. Percent-valued gaps, RMSE or
/// accuracy (percent) as utility; parameter distance excludes intercepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub m: usize,
    pub rank: usize,
    pub utility: Option<f64>,
    pub detail: Utility,
    pub dp: Option<f64>,
    pub tpr: Option<f64>,
    /// Classes left out of the TPR gap for lack of positives in a group.
    pub tpr_skipped: Vec<usize>,
    pub mcdp: Option<f64>,
    pub dcov2: Option<f64>,
    pub param_distance: f64,
    /// Mean per-feature W₁ between groups of the projected covariates.
    pub wd: f64,
    /// W₁ between groups along the LDA direction of the projected covariates.
    pub lda_wd: Option<f64>,
    pub fit: FitReport,
}

impl TradeoffPoint {
    pub fn metric(&self, which: FairnessMetric) -> Option<f64> {
        match which {
            FairnessMetric::Dp => self.dp,
            FairnessMetric::Tpr => self.tpr,
            FairnessMetric::Mcdp => self.mcdp,
            FairnessMetric::Dcov => self.dcov2,
        }
    }
}

/// Everything needed to rerun a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub config_digest: String,
    pub dataset_digest: String,
    pub config: Option<RunConfig>,
}

impl Provenance {
    pub fn new(cfg: &RunConfig, ds: &Dataset) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config_digest: cfg.digest(),
            dataset_digest: ds.digest(),
            config: Some(cfg.clone()),
        }
    }
}

/// Outcome of [`select`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub m: usize,
    /// No level met the utility floor and the fallback was applied.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub task: Task,
    pub evaluated_on: SplitTag,
    pub points: Vec<TradeoffPoint>,
    pub baseline: Option<TradeoffPoint>,
    pub selected_m: Option<usize>,
    pub fallback_used: bool,
    pub rule: SelectionRule,
    pub family: Option<FairProjectionFamily>,
    /// One model per point, same order.
    pub models: Vec<Model>,
    pub baseline_model: Option<Model>,
    pub provenance: Option<Provenance>,
}

impl SweepReport {
    /// A report with no points.
    pub fn empty(task: Task, rule: SelectionRule) -> Self {
        Self {
            task,
            evaluated_on: SplitTag::Val,
            points: Vec::new(),
            baseline: None,
            selected_m: None,
            fallback_used: false,
            rule,
            family: None,
            models: Vec::new(),
            baseline_model: None,
            provenance: None,
        }
    }

    pub fn point(&self, m: usize) -> Option<&TradeoffPoint> {
        self.points.iter().find(|p| p.m == m)
    }

    pub fn model(&self, m: usize) -> Option<&Model> {
        self.points.iter().position(|p| p.m == m).and_then(|i| self.models.get(i))
    }
}

/// Options for [`sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub model: ModelKind,
    pub l2: f64,
    pub m_step: usize,
    pub dcov_cap: usize,
    pub seed: u64,
    pub rule: SelectionRule,
}

impl SweepOptions {
    pub fn for_task(task: Task) -> Self {
        Self {
            model: task.default_model(),
            l2: 1e-4,
            m_step: 1,
            dcov_cap: crate::fairness::DCOV_CAP,
            seed: 0,
            rule: SelectionRule {
                metric: task.default_metric(),
                ..SelectionRule::default()
            },
        }
    }

    pub fn from_config(cfg: &RunConfig, task: Task) -> Self {
        Self {
            model: cfg.model.unwrap_or(task.default_model()),
            l2: cfg.l2,
            m_step: cfg.m_step,
            dcov_cap: cfg.dcov_cap,
            seed: cfg.seed,
            rule: SelectionRule {
                tau: cfg.tau,
                metric: cfg.metric.unwrap_or(task.default_metric()),
                fallback: cfg.fallback,
            },
        }
    }
}

/// Levels `0, k, 2k, …` plus `s`.
pub fn sweep_levels(s: usize, step: usize) -> Vec<usize> {
    let step = step.max(1);
    let mut out: Vec<usize> = (0..=s).step_by(step).collect();
    if out.last() != Some(&s) {
        out.push(s);
    }
    out
}

/// Fits `kind` on `x·V` and maps the coefficients back through `V`.
pub fn fit_projected(
    kind: ModelKind,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    basis: Option<&OrthonormalBasis>,
    opts: &SoftmaxOptions,
) -> Result<(Model, FitReport)> {
    let Some(v) = basis else {
        return fit(kind, x, y, opts);
    };
    let t = x * v.columns();
    let (m, rep) = fit(kind, &t, y, opts)?;
    let lifted = match m {
        Model::Linear(lm) => Model::Linear(LinearModel {
            theta: v.columns() * &lm.theta,
            intercept: lm.intercept,
        }),
        Model::Softmax(sm) => {
            let k = sm.weights.ncols();
            let p = x.ncols();
            let mut w = DMatrix::zeros(p + 1, k);
            w.row_mut(0).copy_from(&sm.weights.row(0));
            let inner = sm.weights.rows(1, sm.weights.nrows() - 1);
            w.rows_mut(1, p).copy_from(&(v.columns() * inner));
            Model::Softmax(SoftmaxModel { weights: w, l2: sm.l2 })
        }
    };
    Ok((lifted, rep))
}

/// All metrics of `model` on `ds`; `basis` spans the covariates the model sees.
pub fn evaluate(
    model: &Model,
    reference: Option<&Model>,
    basis: Option<&OrthonormalBasis>,
    ds: &Dataset,
    task: Task,
    dcov_cap: usize,
    seed: u64,
) -> Result<(Utility, Metrics)> {
    let pred = model.predict(&ds.x);
    let classification = task == Task::Classification;
    let detail = utility_metrics(&pred, &ds.y, &ds.z, classification)?;
    let mut mx = Metrics {
        param_distance: reference.map(|r| model.param_distance(r)).unwrap_or(0.0),
        ..Metrics::default()
    };
    let both = ds.z.contains(&0) && ds.z.contains(&1);
    if ds.n() >= 2 {
        mx.dcov2 = Some(dcov2(&pred, &ds.z, dcov_cap, derive_seed(seed, 7))?);
    }
    if classification && both {
        let labels = ds.labels();
        let gp = GroupedPredictions::new(&pred, Some(&labels), &ds.z)?;
        mx.dp = Some(dp_gap(&gp)?);
        mx.mcdp = Some(mcdp(&gp)?);
        let t = tpr_gap(&gp)?;
        mx.tpr = Some(t.value);
        mx.tpr_skipped = t.skipped;
    }
    if both {
        let (xp, xr) = match basis {
            Some(v) => {
                let xr = &ds.x * v.columns();
                (&xr * v.columns().transpose(), xr)
            }
            None => (ds.x.clone(), ds.x.clone()),
        };
        mx.wd = mean_group_wasserstein(&xp, &ds.z);
        if xr.ncols() > 0 {
            mx.lda_wd = lda_wasserstein(&xr, &ds.z).ok();
        } else {
            mx.lda_wd = Some(0.0);
        }
    }
    Ok((detail, mx))
}

/// Fairness and representation metrics of a single evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub dp: Option<f64>,
    pub tpr: Option<f64>,
    pub tpr_skipped: Vec<usize>,
    pub mcdp: Option<f64>,
    pub dcov2: Option<f64>,
    pub param_distance: f64,
    pub wd: f64,
    pub lda_wd: Option<f64>,
}

fn utility_value(task: Task, u: &Utility) -> Option<f64> {
    match task {
        Task::Regression => u.rmse,
        Task::Classification => u.accuracy,
    }
}

fn assemble(m: usize, rank: usize, task: Task, detail: Utility, mx: Metrics, fit: FitReport) -> TradeoffPoint {
    TradeoffPoint {
        m,
        rank,
        utility: utility_value(task, &detail),
        detail,
        dp: mx.dp,
        tpr: mx.tpr,
        tpr_skipped: mx.tpr_skipped,
        mcdp: mx.mcdp,
        dcov2: mx.dcov2,
        param_distance: mx.param_distance,
        wd: mx.wd,
        lda_wd: mx.lda_wd,
        fit,
    }
}

/// Fits the baseline on the raw covariates and one model per projection
/// level, evaluates all of them on `eval` and applies the selection rule.
pub fn sweep(
    family: &FairProjectionFamily,
    train: &Dataset,
    eval: &Dataset,
    eval_tag: SplitTag,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    let task = Task::of(train);
    if train.p() != family.p() || eval.p() != family.p() {
        return Err(SfpError::Dimension("family and data dimensions differ".into()));
    }
    let sopts = SoftmaxOptions {
        l2: opts.l2,
        ..SoftmaxOptions::default()
    };
    let y = &train.y;
    let (base_model, base_fit) = fit_projected(opts.model, &train.x, y, None, &sopts)?;
    let (bu, bm) = evaluate(&base_model, None, None, eval, task, opts.dcov_cap, opts.seed)?;
    let baseline = assemble(family.s(), train.p(), task, bu, bm, base_fit);

    let levels = sweep_levels(family.s(), opts.m_step);
    let fitted: Vec<(TradeoffPoint, Model)> = levels
        .par_iter()
        .map(|&m| -> Result<(TradeoffPoint, Model)> {
            let basis = family.basis(m)?;
            let (model, rep) = fit_projected(opts.model, &train.x, y, Some(&basis), &sopts)?;
            let (u, mx) = evaluate(&model, Some(&base_model), Some(&basis), eval, task, opts.dcov_cap, opts.seed)?;
            Ok((assemble(m, basis.rank(), task, u, mx, rep), model))
        })
        .collect::<Result<Vec<_>>>()?;
    let (points, models): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();

    let mut report = SweepReport {
        task,
        evaluated_on: eval_tag,
        points,
        baseline: Some(baseline),
        selected_m: None,
        fallback_used: false,
        rule: opts.rule,
        family: Some(family.clone()),
        models,
        baseline_model: Some(base_model),
        provenance: None,
    };
    if let Some(sel) = select(&report.points, report.baseline.as_ref(), task, &opts.rule) {
        report.selected_m = Some(sel.m);
        report.fallback_used = sel.fallback;
    }
    Ok(report)
}

/// Whether `point` meets the utility floor relative to `baseline`.
pub fn feasible(point: &TradeoffPoint, baseline: Option<&TradeoffPoint>, task: Task, tau: f64) -> bool {
    let Some(b) = baseline.and_then(|b| b.utility) else {
        return true;
    };
    match (point.utility, task) {
        (Some(u), Task::Classification) => u > tau * b,
        (Some(u), Task::Regression) => u < b / tau,
        (None, _) => false,
    }
}

/// Among feasible points the one with the smallest fairness metric; ties go
/// to the smaller `m` and missing metric values rank last. With no feasible
/// point the fallback applies and is flagged. `None` only for no points.
pub fn select(
    points: &[TradeoffPoint],
    baseline: Option<&TradeoffPoint>,
    task: Task,
    rule: &SelectionRule,
) -> Option<Selection> {
    if points.is_empty() {
        return None;
    }
    let mut best: Option<(&TradeoffPoint, f64)> = None;
    let mut ordered: Vec<&TradeoffPoint> = points.iter().collect();
    ordered.sort_by_key(|p| p.m);
    for p in &ordered {
        if !feasible(p, baseline, task, rule.tau) {
            continue;
        }
        let v = p.metric(rule.metric).filter(|v| v.is_finite()).unwrap_or(f64::INFINITY);
        if best.is_none_or(|(_, bv)| v < bv) {
            best = Some((p, v));
        }
    }
    if let Some((p, _)) = best {
        return Some(Selection { m: p.m, fallback: false });
    }
    let m = match rule.fallback {
        Fallback::Full => ordered.last().expect("non-empty").m,
        Fallback::BestUtility => {
            let score = |p: &TradeoffPoint| match (p.utility, task) {
                (Some(u), Task::Classification) => u,
                (Some(u), Task::Regression) => -u,
                (None, _) => f64::NEG_INFINITY,
            };
            ordered
                .iter()
                .fold(None::<&TradeoffPoint>, |acc, p| match acc {
                    Some(a) if score(a) >= score(p) => Some(a),
                    _ => Some(p),
                })
                .expect("non-empty")
                .m
        }
    };
    Some(Selection { m, fallback: true })
}

/// Metrics of the model at level `m` on another split.
pub fn evaluate_level(report: &SweepReport, m: usize, data: &Dataset, dcov_cap: usize, seed: u64) -> Result<TradeoffPoint> {
    let model = report
        .model(m)
        .ok_or_else(|| SfpError::Input(format!("report has no model for m = {m}")))?;
    let family = report
        .family
        .as_ref()
        .ok_or_else(|| SfpError::Input("report has no projection family".into()))?;
    let basis = family.basis(m)?;
    let (u, mx) = evaluate(
        model,
        report.baseline_model.as_ref(),
        Some(&basis),
        data,
        report.task,
        dcov_cap,
        seed,
    )?;
    let fit = report.point(m).map(|p| p.fit.clone()).unwrap_or_default();
    Ok(assemble(m, basis.rank(), report.task, u, mx, fit))
}

/// Re-evaluates the selected model on `test`.
pub fn evaluate_test(report: &SweepReport, test: &Dataset, dcov_cap: usize, seed: u64) -> Result<TradeoffPoint> {
    let m = report
        .selected_m
        .ok_or_else(|| SfpError::Input("report has no selected_m".into()))?;
    evaluate_level(report, m, test, dcov_cap, seed)
}

/// Baseline model metrics on `data`.
pub fn evaluate_baseline(report: &SweepReport, data: &Dataset, dcov_cap: usize, seed: u64) -> Result<TradeoffPoint> {
    let model = report
        .baseline_model
        .as_ref()
        .ok_or_else(|| SfpError::Input("report has no baseline model".into()))?;
    let (u, mx) = evaluate(model, None, None, data, report.task, dcov_cap, seed)?;
    let s = report.family.as_ref().map(|f| f.s()).unwrap_or(0);
    let fit = report.baseline.as_ref().map(|p| p.fit.clone()).unwrap_or_default();
    Ok(assemble(s, data.p(), report.task, u, mx, fit))
}

/// Split used for sweep metrics: validation when present, else test.
pub fn evaluation_split(ds: &Dataset) -> SplitTag {
    if ds.indices(SplitTag::Val).is_empty() {
        SplitTag::Test
    } else {
        SplitTag::Val
    }
}

/// Family estimation on the training split followed by [`sweep`].
pub fn run(cfg: &RunConfig, ds: &Dataset) -> Result<SweepReport> {
    let task = Task::of(ds);
    let train = ds.part(SplitTag::Train);
    let tag = evaluation_split(ds);
    let eval = ds.part(tag);
    let labels;
    let target = match task {
        Task::Regression => Target::Continuous(&train.y),
        Task::Classification => {
            labels = train.labels();
            Target::Labels(&labels)
        }
    };
    let family = estimate_family(&train.x, target, &train.z, &cfg.decomposition())?;
    let mut report = sweep(&family, &train, &eval, tag, &SweepOptions::from_config(cfg, task))?;
    report.provenance = Some(Provenance::new(cfg, ds));
    Ok(report)
}

pub const TSV_HEADER: &str = "m\tutility\tdp\ttpr\tmcdp\tdcov2\tparam_distance\twd";

fn tsv_row(label: &str, p: &TradeoffPoint) -> String {
    format!(
        "{label}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        tsv_cell(p.utility),
        tsv_cell(p.dp),
        tsv_cell(p.tpr),
        tsv_cell(p.mcdp),
        tsv_cell(p.dcov2),
        tsv_cell(Some(p.param_distance)),
        tsv_cell(Some(p.wd)),
    )
}

/// Trade-off table, one row per level; the baseline goes in a comment line.
pub fn tradeoff_tsv(report: &SweepReport) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    if let Some(b) = &report.baseline {
        out.push_str(&format!("# baseline\t{}\n", tsv_row("", b).trim_start()));
    }
    for p in &report.points {
        out.push_str(&tsv_row(&p.m.to_string(), p));
        out.push('\n');
    }
    out
}
