//! `sfp`: simulate data, sweep the fair projection family, study influence
//! functions and evaluate selected models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use sfp_core::data::config::{DatasetSpec, RunConfig};
use sfp_core::data::report::{read_report, write_report};
use sfp_core::data::synth::{generate, SynthConfig};
use sfp_core::data::{Dataset, SplitTag, Truth};
use sfp_core::fairness::FairnessMetric;
use sfp_core::influence::{fd_validation, mc_normality, AsymptoticReport, FunctionalRanks, MonteCarloConfig};
use sfp_core::pipeline::{evaluate_baseline, evaluate_test, run, tradeoff_tsv, Provenance, SweepReport, TradeoffPoint};
use sfp_core::predictors::ModelKind;
use sfp_core::SfpError;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] SfpError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                SfpError::Input(_)
                | SfpError::Csv { .. }
                | SfpError::Schema { .. }
                | SfpError::Io(_)
                | SfpError::Json(_) => 1,
                SfpError::Conditioning(_)
                | SfpError::Dimension(_)
                | SfpError::DegenerateSpectrum { .. }
                | SfpError::Metric(_) => 3,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sfp", version, about = "Sequential fair projection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its ground truth.
    Simulate(Common),
    /// Estimate the projection family, sweep its levels and select one.
    Sweep(Common),
    /// Monte Carlo and finite-difference study of the influence functions.
    Influence(Common),
    /// Evaluate the selected model of a sweep report on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Sweep report; defaults to `<out>/sweep.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Dp,
    Tpr,
    Mcdp,
    Dcov,
}

impl From<MetricArg> for FairnessMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Dp => FairnessMetric::Dp,
            MetricArg::Tpr => FairnessMetric::Tpr,
            MetricArg::Mcdp => FairnessMetric::Mcdp,
            MetricArg::Dcov => FairnessMetric::Dcov,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for data generation, splits, bootstrap and subsampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "sfp-out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Stride between swept projection levels; the top level is always kept.
    #[arg(long = "m-step")]
    m_step: Option<usize>,
    /// Utility floor as a fraction of the unprojected baseline, in (0, 1].
    #[arg(long)]
    tau: Option<f64>,
    /// Fairness metric minimized by the selection rule.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

impl Common {
    /// File config (or defaults) with flag overrides applied and validated.
    fn config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        if let Some(k) = self.m_step {
            cfg.m_step = k;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(m) = self.metric {
            cfg.metric = Some(m.into());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn prepare(common: &Common) -> CliResult<RunConfig> {
    let cfg = common.config()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&common.out).map_err(SfpError::from)?;
    Ok(cfg)
}

fn synthetic(cfg: &RunConfig, command: &str) -> CliResult<SynthConfig> {
    match &cfg.dataset {
        DatasetSpec::Synthetic(s) => Ok(SynthConfig { seed: cfg.seed, ..s.clone() }),
        _ => Err(CliError::Usage(format!("`{command}` needs a synthetic dataset in the config"))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SimulateReport {
    rows: usize,
    features: usize,
    targets: usize,
    positive_rate: f64,
    files: Vec<String>,
    notes: Vec<String>,
    truth: Truth,
    provenance: Provenance,
}

fn write_dataset_csv(ds: &Dataset, path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SfpError::Input(e.to_string()))?;
    let mut header: Vec<String> = (0..ds.p()).map(|j| format!("x{j}")).collect();
    header.extend((0..ds.y.ncols()).map(|k| format!("y{k}")));
    header.push("z".into());
    w.write_record(&header).map_err(|e| SfpError::Input(e.to_string()))?;
    for i in 0..ds.n() {
        let mut row: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v:e}")).collect();
        row.extend(ds.y.row(i).iter().map(|v| format!("{v:e}")));
        row.push(ds.z[i].to_string());
        w.write_record(&row).map_err(|e| SfpError::Input(e.to_string()))?;
    }
    w.flush().map_err(SfpError::from)?;
    Ok(())
}

fn simulate(common: &Common) -> CliResult<u8> {
    let cfg = prepare(common)?;
    let ds = generate(&synthetic(&cfg, "simulate")?)?;
    write_dataset_csv(&ds, &common.out.join("data.csv"))?;
    let report = SimulateReport {
        rows: ds.n(),
        features: ds.p(),
        targets: ds.y.ncols(),
        positive_rate: ds.z.iter().sum::<usize>() as f64 / ds.n() as f64,
        files: vec!["data.csv".into()],
        notes: ds.notes.clone(),
        truth: ds.truth.clone().expect("synthetic data carries truth"),
        provenance: Provenance::new(&cfg, &ds),
    };
    write_report(&report, &common.out.join("simulate.json"))?;
    println!(
        "simulated {} x {} (P(z = 1) = {:.3}) into {}",
        report.rows,
        report.features,
        report.positive_rate,
        common.out.display()
    );
    Ok(0)
}

fn sweep_cmd(common: &Common) -> CliResult<u8> {
    let cfg = prepare(common)?;
    let ds = cfg.load_dataset()?;
    let report = run(&cfg, &ds)?;
    write_report(&report, &common.out.join("sweep.json"))?;
    std::fs::write(common.out.join("tradeoff.tsv"), tradeoff_tsv(&report)).map_err(SfpError::from)?;
    let fam = report.family.as_ref().expect("run attaches the family");
    println!(
        "s = {}, unshared rank {}, levels {}, selected m = {}{}",
        fam.s(),
        fam.diagnostics.unshared_rank,
        report.points.len(),
        report.selected_m.map_or("none".to_string(), |m| m.to_string()),
        if report.fallback_used { " (fallback)" } else { "" }
    );
    for w in &fam.diagnostics.warnings {
        log::warn!("{w}");
    }
    Ok(if report.fallback_used { 2 } else { 0 })
}

fn influence_cmd(common: &Common) -> CliResult<u8> {
    let cfg = prepare(common)?;
    let synth = synthetic(&cfg, "influence")?;
    let settings = &cfg.influence;
    let mc_cfg = MonteCarloConfig {
        levels: settings.levels.clone(),
        decomposition: cfg.decomposition(),
        model: cfg.model.unwrap_or(ModelKind::Linear),
        ..MonteCarloConfig::new(synth.clone(), settings.n_list.clone(), settings.replications, cfg.seed)
    };
    if mc_cfg.model != ModelKind::Linear {
        return Err(CliError::Usage("`influence` supports the linear model only".into()));
    }
    let mut report: AsymptoticReport = mc_normality(&mc_cfg)?;
    let n = settings.n_list.iter().copied().min().unwrap_or(synth.n);
    let ds = generate(&SynthConfig { n, ..synth })?;
    let ranks = FunctionalRanks {
        sensitive: report.ranks.sensitive,
        unshared: report.ranks.unshared,
        shared: report.ranks.shared,
    };
    let level = report.levels.iter().map(|l| l.m).max().unwrap_or(0);
    let probes: Vec<usize> = [0, n / 2, n - 1].into_iter().collect();
    report.validation = Some(fd_validation(
        &ds.x,
        &ds.y,
        &ds.z,
        &cfg.decomposition(),
        ranks,
        level,
        &probes,
        settings.eps,
    )?);
    write_report(&report, &common.out.join("influence.json"))?;
    let v = report.validation.as_ref().expect("set above");
    println!(
        "ranks {:?}; eigenvector IF rel err {:.2e}; projection {:.2e}; coefficients {:.2e}",
        report.ranks, v.eigvec_max_rel, v.projection_max_rel, v.theta_max_rel
    );
    for l in &report.levels {
        println!("m = {}: share of scaling ratios in band {:?}", l.m, l.fraction_in_band);
    }
    Ok(0)
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalReport {
    selected_m: usize,
    fallback_used: bool,
    selected: TradeoffPoint,
    baseline: TradeoffPoint,
    provenance: Provenance,
}

fn eval_cmd(common: &Common, report_path: Option<&Path>) -> CliResult<u8> {
    let path = report_path.map(Path::to_path_buf).unwrap_or_else(|| common.out.join("sweep.json"));
    let report: SweepReport = read_report(&path)?;
    let cfg = match (&common.config, report.provenance.as_ref().and_then(|p| p.config.clone())) {
        (None, Some(embedded)) => {
            let mut c = embedded;
            if let Some(s) = common.seed {
                c.seed = s;
            }
            c.validate()?;
            c
        }
        _ => common.config()?,
    };
    let Some(m) = report.selected_m else {
        return Err(CliError::Usage(format!("{} has no selected_m", path.display())));
    };
    std::fs::create_dir_all(&common.out).map_err(SfpError::from)?;
    let ds = cfg.load_dataset()?;
    if let Some(p) = &report.provenance {
        if p.dataset_digest != ds.digest() {
            return Err(CliError::Usage("dataset differs from the one recorded in the report".into()));
        }
    }
    let test = ds.part(SplitTag::Test);
    let out = EvalReport {
        selected_m: m,
        fallback_used: report.fallback_used,
        selected: evaluate_test(&report, &test, cfg.dcov_cap, cfg.seed)?,
        baseline: evaluate_baseline(&report, &test, cfg.dcov_cap, cfg.seed)?,
        provenance: Provenance::new(&cfg, &ds),
    };
    write_report(&out, &common.out.join("eval.json"))?;
    let metric = report.rule.metric;
    println!(
        "m = {m}: utility {} (baseline {}), {metric:?} {} (baseline {})",
        show(out.selected.utility),
        show(out.baseline.utility),
        show(out.selected.metric(metric)),
        show(out.baseline.metric(metric))
    );
    Ok(if report.fallback_used { 2 } else { 0 })
}

fn show(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Sweep(c) => sweep_cmd(c),
        Command::Influence(c) => influence_cmd(c),
        Command::Eval { common, report } => eval_cmd(common, report.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
