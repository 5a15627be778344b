//! Commands behind the `gamma-contam` binary.
//!
//! Every command returns its outputs as strings so they can be compared
//! byte for byte; [`run`] writes them to `--out` or stdout.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gamma_contam::detectors::{DetectorKind, DetectorSpec};
use gamma_contam::eval::{self, CalibrationPoint, EvalReport, EvalRow};
use gamma_contam::gammapost::{self, EstimatorConfig, GammaPosterior, GammaSummary};
use gamma_contam::scorespace::{build_score_matrix, ingest_scores};
use gamma_contam::thresholds::{self, Method};
use gamma_contam::{seed, synth, CalibrationTargets, DpgmmConfig, RawDataset, ScoreMatrix};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "GAMMA_CONTAM_THREADS";
pub const GAMMAGMM: &str = "gammagmm";

const DETECTOR_STREAM: u64 = 0x0044_4554;
const BENCH_STREAM: u64 = 0x4245_4e43;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Compute(gamma_contam::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Compute(_) => 1,
        }
    }
}

impl From<gamma_contam::Error> for CliError {
    fn from(e: gamma_contam::Error) -> Self {
        use gamma_contam::Error as E;
        match e {
            E::Io(_) | E::Parse { .. } => CliError::Io(e.to_string()),
            E::InvalidInput(_) | E::InvalidParameter { .. } | E::NonFinite { .. } | E::TooFewRows { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Compute(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "gamma-contam", version, about = "Posterior estimation of the contamination factor of unlabeled data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Estimate the contamination posterior of one dataset.
    Estimate(RunArgs),
    /// Apply the classical threshold rules to every score column.
    Thresholds(RunArgs),
    /// Compare the posterior mean against the threshold rules on labeled data.
    Benchmark(RunArgs),
    /// Write the raw posterior samples as a one-column CSV.
    SampleDump(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::Thresholds(_) => "thresholds",
            Command::Benchmark(_) => "benchmark",
            Command::SampleDump(_) => "sample-dump",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Estimate(a) | Command::Thresholds(a) | Command::Benchmark(a) | Command::SampleDump(a) => a,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Feature CSV (a directory of CSVs for `benchmark`). A last column named
    /// `label` holds 0/1 ground truth.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Precomputed N x M score CSV used instead of running detectors.
    #[arg(long, conflicts_with = "input")]
    pub scores: Option<PathBuf>,
    /// Built-in detectors, e.g. `knn:k=5,lof,iforest:trees=50,hbos`.
    #[arg(long, value_delimiter = ',', default_value = "knn,lof,iforest,hbos")]
    pub detectors: Vec<String>,
    /// Extra score column read from a one-column CSV; repeatable.
    #[arg(long)]
    pub external: Vec<PathBuf>,
    #[arg(long, default_value_t = gammapost::calibrate::DEFAULT_P0)]
    pub p0: f64,
    #[arg(long, default_value_t = gammapost::calibrate::DEFAULT_P_HIGH)]
    pub phigh: f64,
    #[arg(long, default_value_t = gammapost::calibrate::DEFAULT_T)]
    pub t: f64,
    #[arg(long, default_value_t = gammapost::calibrate::DEFAULT_CAP)]
    pub cap: f64,
    #[arg(long, default_value_t = gammapost::DEFAULT_RESTARTS)]
    pub restarts: usize,
    /// Posterior samples per restart.
    #[arg(long, default_value_t = gammapost::sample::DEFAULT_DRAWS)]
    pub samples: usize,
    #[arg(long, default_value_t = 100)]
    pub max_components: usize,
    /// Fits tried per restart while calibration is infeasible.
    #[arg(long, default_value_t = gammapost::DEFAULT_MAX_ATTEMPTS)]
    pub max_attempts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Threshold methods for `thresholds` and `benchmark`.
    #[arg(long, value_delimiter = ',', default_value = "iqr,zscore,chauvenet,mad,karcher,mtt,gesd,boot,qmcd")]
    pub methods: Vec<String>,
    /// Also write `samples.csv` next to the posterior JSON.
    #[arg(long)]
    pub write_samples: bool,
    /// Benchmark on this many generated datasets instead of `--input`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Rows per generated dataset.
    #[arg(long, default_value_t = 2000)]
    pub synthetic_rows: usize,
}

/// Everything that determines a command's output.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<String>,
    pub scores: Option<String>,
    pub detectors: Vec<String>,
    pub p0: f64,
    pub p_high: f64,
    pub t: f64,
    pub cap: f64,
    pub restarts: usize,
    pub samples: usize,
    pub max_components: usize,
    pub max_attempts: usize,
    pub seed: u64,
    pub methods: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: RunConfig,
}

struct Resolved {
    config: RunConfig,
    detectors: Vec<DetectorSpec>,
    methods: Vec<Method>,
    estimator: EstimatorConfig,
}

fn resolve(command: &str, a: &RunArgs) -> Result<Resolved> {
    let mut detectors = a
        .detectors
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<DetectorSpec>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    detectors.extend(a.external.iter().map(DetectorSpec::external));
    for (j, d) in detectors.iter_mut().enumerate() {
        d.seed = seed::derive(a.seed, &[DETECTOR_STREAM, j as u64]);
    }
    let methods = a.methods.iter().map(|s| s.parse::<Method>()).collect::<std::result::Result<Vec<_>, _>>()?;
    let targets = CalibrationTargets { p0: a.p0, p_high: a.phigh, t: a.t, cap: a.cap };
    let estimator = EstimatorConfig {
        dpgmm: DpgmmConfig { max_components: a.max_components, ..DpgmmConfig::default() },
        targets,
        restarts: a.restarts,
        draws_per_restart: a.samples,
        max_attempts: a.max_attempts,
        seed: a.seed,
        ..EstimatorConfig::default()
    };
    estimator.validate()?;
    estimator.dpgmm.prior(1)?;
    let config = RunConfig {
        command: command.to_string(),
        input: a.input.as_ref().map(|p| p.display().to_string()),
        scores: a.scores.as_ref().map(|p| p.display().to_string()),
        detectors: detectors.iter().map(|d| d.to_string()).collect(),
        p0: a.p0,
        p_high: a.phigh,
        t: a.t,
        cap: a.cap,
        restarts: a.restarts,
        samples: a.samples,
        max_components: a.max_components,
        max_attempts: a.max_attempts,
        seed: a.seed,
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        synthetic: a.synthetic.map(|c| (c, a.synthetic_rows)),
    };
    Ok(Resolved { config, detectors, methods, estimator })
}

impl Resolved {
    fn metadata(&self) -> Metadata {
        Metadata { tool: "gamma-contam", version: VERSION, config: self.config.clone() }
    }

    fn csv_header(&self) -> String {
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        format!("# gamma-contam {VERSION}\n# config {cfg}\n")
    }
}

fn file_has_header(path: &Path) -> Result<bool> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let first = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#'));
    Ok(first.is_some_and(|l| l.split(',').any(|c| c.trim().parse::<f64>().is_err())))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{}: no such file", path.display())))
    }
}

/// Transformed score matrix plus labels when the input carried them.
fn load(r: &Resolved, a: &RunArgs) -> Result<(ScoreMatrix, Option<Vec<u8>>)> {
    if let Some(p) = &a.scores {
        require_file(p)?;
        let m: ScoreMatrix = ingest_scores(p, file_has_header(p)?)?;
        return Ok((m.transformed()?, None));
    }
    let Some(p) = &a.input else {
        return Err(CliError::Usage("one of --input or --scores is required".into()));
    };
    require_file(p)?;
    let data = RawDataset::from_csv(p)?;
    scores_for(r, &data)
}

fn scores_for(r: &Resolved, data: &RawDataset) -> Result<(ScoreMatrix, Option<Vec<u8>>)> {
    if r.detectors.is_empty() {
        return Err(CliError::Usage("no detectors selected".into()));
    }
    for d in &r.detectors {
        if let DetectorKind::External { path } = &d.kind {
            require_file(path)?;
        }
    }
    let m = build_score_matrix(data, &r.detectors)?;
    Ok((m, data.labels().map(<[u8]>::to_vec)))
}

#[derive(Debug, Clone, Serialize)]
struct PosteriorReport {
    metadata: Metadata,
    #[serde(flatten)]
    summary: GammaSummary,
}

fn samples_csv(r: &Resolved, gp: &GammaPosterior) -> String {
    let mut s = r.csv_header();
    s.push_str("gamma\n");
    for g in &gp.samples {
        s.push_str(&format!("{g}\n"));
    }
    s
}

#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub json: String,
    pub samples_csv: Option<String>,
    /// Every restart ran out of attempts, so the posterior is the zero atom.
    pub exhausted: bool,
}

pub fn cmd_estimate(a: &RunArgs) -> Result<EstimateOutput> {
    let r = resolve("estimate", a)?;
    let (scores, _) = load(&r, a)?;
    let gp = gammapost::estimate(&scores, &r.estimator)?;
    let mut summary = gp.summary(&r.estimator);
    let samples_csv = a.write_samples.then(|| {
        summary.samples_path = Some("samples.csv".into());
        samples_csv(&r, &gp)
    });
    let exhausted = gp.restarts.iter().all(|i| i.sigmoid.is_none());
    let report = PosteriorReport { metadata: r.metadata(), summary };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    Ok(EstimateOutput { json, samples_csv, exhausted })
}

pub fn cmd_sample_dump(a: &RunArgs) -> Result<String> {
    let r = resolve("sample-dump", a)?;
    let (scores, _) = load(&r, a)?;
    let gp = gammapost::estimate(&scores, &r.estimator)?;
    Ok(samples_csv(&r, &gp))
}

pub fn cmd_thresholds(a: &RunArgs) -> Result<String> {
    let r = resolve("thresholds", a)?;
    let (scores, _) = load(&r, a)?;
    let (estimates, failed) = thresholds::estimate_all(&scores, &r.methods, a.seed);
    if estimates.is_empty() && !failed.is_empty() {
        let msg: Vec<String> = failed.iter().map(|(m, e)| format!("{m}: {e}")).collect();
        return Err(CliError::Compute(gamma_contam::Error::InvalidInput(msg.join("; "))));
    }
    let mut out = r.csv_header();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["method".to_string()];
    head.extend(scores.detector_names().iter().map(|n| format!("threshold_{n}")));
    head.push("gamma_hat".into());
    w.write_record(&head).map_err(csv_err)?;
    for e in &estimates {
        let mut rec = vec![e.method.to_string()];
        rec.extend(e.thresholds.iter().map(|t| t.to_string()));
        rec.push(e.gamma_hat.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    out.push_str(&finish(w)?);
    Ok(out)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutput {
    pub report_csv: String,
    pub calibration_csv: String,
    pub ranks_csv: String,
    pub estimates_csv: String,
    pub report: EvalReport,
}

struct DatasetResult {
    name: String,
    estimates: Vec<(String, f64)>,
    rows: Vec<EvalRow>,
    posterior: GammaPosterior,
    gamma_true: Option<f64>,
}

fn bench_datasets(a: &RunArgs) -> Result<Vec<RawDataset>> {
    if let Some(count) = a.synthetic {
        return synth::suite(count, a.synthetic_rows, a.seed)
            .iter()
            .map(|c| synth::generate(c).map_err(CliError::from))
            .collect();
    }
    let Some(p) = &a.input else {
        return Err(CliError::Usage("benchmark needs --input <dir> or --synthetic <count>".into()));
    };
    let files: Vec<PathBuf> = if p.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(p)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
            .collect();
        v.sort();
        v
    } else {
        require_file(p)?;
        vec![p.clone()]
    };
    if files.is_empty() {
        return Err(CliError::Usage(format!("no CSV files in {}", p.display())));
    }
    files
        .iter()
        .map(|f| {
            let mut d = RawDataset::from_csv(f)?;
            d.name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(d)
        })
        .collect()
}

pub fn cmd_benchmark(a: &RunArgs) -> Result<BenchmarkOutput> {
    let r = resolve("benchmark", a)?;
    let datasets = bench_datasets(a)?;
    let results: Vec<DatasetResult> = datasets
        .par_iter()
        .enumerate()
        .map(|(i, d)| bench_one(&r, d, i))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut posts = Vec::new();
    let mut truths = Vec::new();
    for res in &results {
        rows.extend(res.rows.iter().cloned());
        if let Some(g) = res.gamma_true {
            posts.push(res.posterior.clone());
            truths.push(g);
        }
    }
    let calibration =
        if posts.is_empty() { Vec::new() } else { eval::calibration_curve(&posts, &truths, &eval::default_v_grid()) };
    let report = EvalReport::from_rows(rows, calibration);

    let header = r.csv_header();
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "method",
        "gamma_hat",
        "gamma_true",
        "mae",
        "f1_true",
        "f1_hat",
        "f1_deterioration",
        "fpr",
        "fnr",
    ])
    .map_err(csv_err)?;
    for row in &report.rows {
        w.write_record([
            row.dataset.clone(),
            row.method.clone(),
            row.gamma_hat.to_string(),
            row.gamma_true.to_string(),
            row.mae.to_string(),
            row.f1_true.to_string(),
            row.f1_hat.to_string(),
            opt(row.f1_deterioration),
            opt(row.fpr),
            opt(row.fnr),
        ])
        .map_err(csv_err)?;
    }
    let report_csv = header.clone() + &finish(w)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["expected", "empirical"]).map_err(csv_err)?;
    for CalibrationPoint { expected, empirical } in &report.calibration {
        w.write_record([expected.to_string(), empirical.to_string()]).map_err(csv_err)?;
    }
    let calibration_csv = header.clone() + &finish(w)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "mean_rank", "mean_mae"]).map_err(csv_err)?;
    for (m, rank) in &report.ranks {
        w.write_record([m.clone(), rank.to_string(), opt(report.mean_mae(m))]).map_err(csv_err)?;
    }
    let ranks_csv = header.clone() + &finish(w)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset", "method", "gamma_hat"]).map_err(csv_err)?;
    for res in &results {
        for (m, g) in &res.estimates {
            w.write_record([res.name.clone(), m.clone(), g.to_string()]).map_err(csv_err)?;
        }
    }
    let estimates_csv = header + &finish(w)?;

    Ok(BenchmarkOutput { report_csv, calibration_csv, ranks_csv, estimates_csv, report })
}

fn bench_one(r: &Resolved, data: &RawDataset, index: usize) -> Result<DatasetResult> {
    let (scores, labels) = scores_for(r, data)?;
    let ds_seed = seed::derive(r.estimator.seed, &[BENCH_STREAM, index as u64]);
    let cfg = EstimatorConfig { seed: ds_seed, ..r.estimator.clone() };
    let posterior = gammapost::estimate(&scores, &cfg)?;
    let mut estimates = vec![(GAMMAGMM.to_string(), gammapost::point_estimate(&posterior))];
    let (th, failed) = thresholds::estimate_all(&scores, &r.methods, ds_seed);
    for (m, e) in failed {
        log::warn!("{}: {m} failed: {e}", data.name);
    }
    estimates.extend(th.iter().map(|e| (e.method.to_string(), e.gamma_hat)));

    let mut rows = Vec::new();
    let gamma_true = data.contamination();
    match (&labels, gamma_true) {
        (Some(labels), Some(g)) => {
            let best = eval::select_best_detectors(scores.columns(), labels, g);
            let cols: Vec<&[f64]> = best.iter().map(|&j| scores.column(j)).collect();
            for (m, gh) in &estimates {
                rows.push(eval::evaluate(&data.name, m, &cols, labels, g, *gh));
            }
        }
        _ => log::warn!("{}: no labels, excluded from metrics and calibration", data.name),
    }
    Ok(DatasetResult { name: data.name.clone(), estimates, rows, posterior, gamma_true })
}

/// Number of worker threads requested through the environment.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        _ => Ok(None),
    }
}

/// Runs `f` on a pool of `threads` workers, or the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn write_out(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Runs a parsed command and writes its outputs. Returns the exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let a = cli.command.args();
    let out = a.out.as_deref();
    match &cli.command {
        Command::Estimate(_) => {
            let res = cmd_estimate(a)?;
            match out {
                Some(dir) => {
                    write_out(dir, "posterior.json", &res.json)?;
                    if let Some(s) = &res.samples_csv {
                        write_out(dir, "samples.csv", s)?;
                    }
                }
                None => print!("{}", res.json),
            }
            if res.exhausted {
                log::error!("calibration infeasible in every restart; reported gamma = 0");
                return Ok(1);
            }
        }
        Command::Thresholds(_) => {
            let csv = cmd_thresholds(a)?;
            match out {
                Some(dir) => write_out(dir, "thresholds.csv", &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::SampleDump(_) => {
            let csv = cmd_sample_dump(a)?;
            match out {
                Some(dir) => write_out(dir, "samples.csv", &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Benchmark(_) => {
            let b = cmd_benchmark(a)?;
            match out {
                Some(dir) => {
                    write_out(dir, "report.csv", &b.report_csv)?;
                    write_out(dir, "calibration.csv", &b.calibration_csv)?;
                    write_out(dir, "ranks.csv", &b.ranks_csv)?;
                    write_out(dir, "estimates.csv", &b.estimates_csv)?;
                }
                None => print!("{}", b.report_csv),
            }
        }
    }
    Ok(0)
}
