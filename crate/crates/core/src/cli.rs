//! Command-line surface: `simulate`, `report`, `estimate` and `ortho-check`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::estimators::{estimate, Dataset, EstimateConfig, EstimatorError, FoldFailure, Method};
use crate::lasso::LassoError;
use crate::numkit::Matrix;
use crate::orthomoments::linear::GaussianLinearModel;
use crate::penalty::PenaltyError;
use crate::orthomoments::{
    certify_function, certify_orthogonality, default_step, lift, numeric_f_derivative, random_unit_directions,
    CERTIFY_SEED,
};
use crate::simkit::{
    compute_metrics, default_grid, kernel_density_with_bandwidth, replication_seed, run_grid, silverman_bandwidth,
    GammaRegime, PreparedDesign, ReplicationOptions, ReplicationRecord, SimDesign,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Header of the replication records file.
pub const RECORDS_HEADER: [&str; 14] = [
    "design_id", "n", "p", "rho", "regime", "rep", "method", "beta_hat", "se", "covered", "ci_length", "t_stat",
    "runtime_ms", "failure",
];

pub const METRICS_HEADER: [&str; 23] = [
    "design_id",
    "n",
    "p",
    "rho",
    "regime",
    "method",
    "n_records",
    "n_ok",
    "n_failed",
    "failure_rate",
    "mean_beta",
    "sq_bias",
    "sq_bias_se",
    "variance",
    "variance_se",
    "mse",
    "mse_se",
    "coverage",
    "coverage_se",
    "mean_ci_length",
    "mean_ci_length_se",
    "mean_t",
    "mean_t_se",
];

pub const ESTIMATE_HEADER: [&str; 9] = ["method", "beta_hat", "se", "ci_lo", "ci_hi", "n", "p", "K", "seed"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "ortho-lasso", version, about = "Double and triple Lasso estimation, simulation and orthogonality checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run Monte Carlo replications and write the records table.
    Simulate(SimulateArgs),
    /// Summarize a records table into metrics and kernel densities.
    Report(ReportArgs),
    /// Estimate the treatment coefficient on a CSV dataset.
    Estimate(EstimateArgs),
    /// Numerically certify the orthogonality of the moment functions.
    OrthoCheck(OrthoCheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON document listing the designs; overrides the single-design flags.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of controls; defaults to n/2.
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value = "exact")]
    pub regime: GammaRegime,
    /// Replications per design; overrides the grid document when given.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Master seed; overrides the grid document when given.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, default_value = "records.csv")]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, env = "ORTHO_LASSO_JOBS")]
    pub jobs: Option<usize>,
    /// Also write every simulated dataset as CSV into this directory.
    #[arg(long)]
    pub emit_data: Option<PathBuf>,
    /// Fill runtime_ms with wall-clock times (makes output non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Records file written by `simulate`.
    pub records: PathBuf,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub beta0: f64,
    #[arg(long, default_value_t = 512)]
    pub grid_points: usize,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// CSV file with a header row.
    pub data: PathBuf,
    #[arg(long)]
    pub treatment: String,
    #[arg(long)]
    pub outcome: String,
    /// Comma-separated control columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    pub controls: Option<Vec<String>>,
    #[arg(long, default_value = "triple")]
    pub method: Method,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Extra node-wise rows beyond the selected treatment support.
    #[arg(long = "L", default_value_t = 0)]
    pub extra: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Also write the result with a header row to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OrthoCheckArgs {
    #[arg(long, default_value_t = 4)]
    pub p: usize,
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    /// Order of the lift: 1 (naive), 2 (double Lasso) or 3 (triple Lasso).
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Finite-difference step; defaults depend on the order.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub directions: usize,
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Report(a) => cmd_report(&a, out),
        Command::Estimate(a) => cmd_estimate(&a, out),
        Command::OrthoCheck(a) => cmd_ortho_check(&a, out),
    }
}

/// Float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

#[derive(Debug, Deserialize)]
struct GridDocument {
    master_seed: Option<u64>,
    reps: Option<usize>,
    folds: Option<usize>,
    beta0: Option<f64>,
    sigma_nu: Option<f64>,
    sigma_eps: Option<f64>,
    designs: Vec<GridCell>,
}

#[derive(Debug, Deserialize)]
struct GridCell {
    design_id: Option<u64>,
    n: usize,
    p: Option<usize>,
    rho: f64,
    regime: GammaRegime,
    reps: Option<usize>,
}

/// Designs requested by the flags, validated before any work starts.
pub fn designs_from_args(a: &SimulateArgs) -> Result<Vec<SimDesign>, CliError> {
    let designs = match &a.grid {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let doc: GridDocument = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: invalid grid document: {e}", path.display())))?;
            if doc.designs.is_empty() {
                return Err(CliError::Usage("grid document lists no designs".into()));
            }
            doc.designs
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let reps = a.reps.or(c.reps).or(doc.reps).ok_or_else(|| {
                        CliError::Usage(format!("design {i}: no replication count in the grid or on the command line"))
                    })?;
                    let mut d = SimDesign::new(
                        c.design_id.unwrap_or(i as u64),
                        c.n,
                        c.p.unwrap_or(c.n / 2),
                        c.rho,
                        c.regime,
                        reps,
                        a.seed.or(doc.master_seed).unwrap_or(0),
                    );
                    d.folds = a.folds.or(doc.folds).unwrap_or(d.folds);
                    d.beta0 = doc.beta0.unwrap_or(d.beta0);
                    d.sigma_nu = doc.sigma_nu.unwrap_or(d.sigma_nu);
                    d.sigma_eps = doc.sigma_eps.unwrap_or(d.sigma_eps);
                    Ok(d)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        None => {
            let n = a.n.ok_or_else(|| CliError::Usage("either --grid or --n is required".into()))?;
            let reps = a.reps.ok_or_else(|| CliError::Usage("--reps is required without --grid".into()))?;
            let mut d = SimDesign::new(0, n, a.p.unwrap_or(n / 2), a.rho, a.regime, reps, a.seed.unwrap_or(0));
            d.folds = a.folds.unwrap_or(d.folds);
            vec![d]
        }
    };
    let mut ids: Vec<u64> = designs.iter().map(|d| d.design_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Usage("design ids must be unique".into()));
    }
    for d in &designs {
        d.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(designs)
}

pub fn write_records(path: &Path, designs: &[SimDesign], records: &[ReplicationRecord]) -> Result<(), CliError> {
    let by_id: BTreeMap<u64, &SimDesign> = designs.iter().map(|d| (d.design_id, d)).collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(RECORDS_HEADER).map_err(|e| io_err(path, e))?;
    for r in records {
        let d = by_id[&r.design_id];
        w.write_record([
            r.design_id.to_string(),
            d.n.to_string(),
            d.p.to_string(),
            fmt_f64(d.rho),
            d.regime.to_string(),
            r.rep_id.to_string(),
            r.method.to_string(),
            fmt_opt(r.beta_hat),
            fmt_opt(r.se),
            r.covered.map(|c| if c { "1" } else { "0" }.to_string()).unwrap_or_default(),
            fmt_opt(r.ci_length),
            fmt_opt(r.t_stat),
            fmt_opt(r.runtime_ms),
            r.failure.clone().unwrap_or_default(),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header = vec!["y".to_string(), "d".to_string()];
    header.extend((1..=data.p()).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for i in 0..data.n() {
        let mut row = vec![fmt_f64(data.y[i]), fmt_f64(data.d[i])];
        row.extend(data.x.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let designs = designs_from_args(a)?;
    let jobs = a.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    let opts = ReplicationOptions { timing: a.timing, empty_support: false };
    let records = pool.install(|| run_grid(&designs, opts)).map_err(|e| CliError::Usage(e.to_string()))?;
    write_records(&a.out, &designs, &records)?;

    if let Some(dir) = &a.emit_data {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for d in &designs {
            let prepared = PreparedDesign::new(d).map_err(|e| CliError::Usage(e.to_string()))?;
            for rep in 0..d.reps as u64 {
                let data = prepared.draw(replication_seed(d.master_seed, d.design_id, rep));
                write_dataset(&dir.join(format!("design{}_rep{rep}.csv", d.design_id)), &data)?;
            }
        }
    }

    let failed = records.iter().filter(|r| !r.is_ok()).count();
    writeln!(out, "wrote {} records ({failed} failed) to {}", records.len(), a.out.display())
        .map_err(|e| CliError::Data(e.to_string()))?;
    if failed == records.len() {
        return Err(CliError::Numerical("every replication failed".into()));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct RecordRow {
    design_id: u64,
    n: usize,
    p: usize,
    rho: f64,
    regime: GammaRegime,
    rep: u64,
    method: Method,
    beta_hat: Option<f64>,
    se: Option<f64>,
    covered: Option<u8>,
    ci_length: Option<f64>,
    t_stat: Option<f64>,
    runtime_ms: Option<f64>,
    failure: Option<String>,
}

/// Design metadata carried alongside each record in the records file.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignKey {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub regime: GammaRegime,
}

/// Reads a records file back into records and per-design metadata.
pub fn read_records(path: &Path) -> Result<(Vec<ReplicationRecord>, BTreeMap<u64, DesignKey>), CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    if header.iter().ne(RECORDS_HEADER.iter().copied()) {
        return Err(CliError::Data(format!("{}: unexpected header `{}`", path.display(), header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut records = Vec::new();
    let mut keys = BTreeMap::new();
    for (line, row) in rdr.deserialize::<RecordRow>().enumerate() {
        let row = row.map_err(|e| CliError::Data(format!("{}: record {}: {e}", path.display(), line + 1)))?;
        let covered = match row.covered {
            None => None,
            Some(0) => Some(false),
            Some(1) => Some(true),
            Some(v) => return Err(CliError::Data(format!("{}: record {}: covered must be 0 or 1, got {v}", path.display(), line + 1))),
        };
        let failure = row.failure.filter(|f| !f.is_empty());
        if failure.is_none() && row.beta_hat.is_none() {
            return Err(CliError::Data(format!("{}: record {}: no estimate and no failure tag", path.display(), line + 1)));
        }
        let key = DesignKey { n: row.n, p: row.p, rho: row.rho, regime: row.regime };
        if let Some(prev) = keys.insert(row.design_id, key.clone()) {
            if prev != key {
                return Err(CliError::Data(format!("{}: design {} has inconsistent metadata", path.display(), row.design_id)));
            }
        }
        records.push(ReplicationRecord {
            design_id: row.design_id,
            rep_id: row.rep,
            method: row.method,
            beta_hat: row.beta_hat,
            se: row.se,
            covered,
            ci_length: row.ci_length,
            t_stat: row.t_stat,
            runtime_ms: row.runtime_ms,
            failure,
        });
    }
    Ok((records, keys))
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.grid_points < 2 {
        return Err(CliError::Usage("--grid-points must be at least 2".into()));
    }
    let (records, keys) = read_records(&a.records)?;
    let mut groups: BTreeMap<(u64, Method), Vec<ReplicationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.design_id, r.method)).or_default().push(r);
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    let metrics_path = a.out_dir.join("metrics.csv");
    let density_path = a.out_dir.join("density.csv");
    let mut mw = csv::Writer::from_path(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let mut dw = csv::Writer::from_path(&density_path).map_err(|e| io_err(&density_path, e))?;
    mw.write_record(METRICS_HEADER).map_err(|e| io_err(&metrics_path, e))?;
    dw.write_record(["design_id", "method", "bandwidth", "x", "density"]).map_err(|e| io_err(&density_path, e))?;

    for ((id, method), recs) in &groups {
        let key = &keys[id];
        let mut row = vec![
            id.to_string(),
            key.n.to_string(),
            key.p.to_string(),
            fmt_f64(key.rho),
            key.regime.to_string(),
            method.to_string(),
            recs.len().to_string(),
        ];
        match compute_metrics(recs, a.beta0) {
            Ok(m) => {
                row.push(m.n_ok.to_string());
                row.push(m.n_failed.to_string());
                row.extend(
                    [
                        m.failure_rate,
                        m.mean_beta,
                        m.sq_bias,
                        m.sq_bias_se,
                        m.variance,
                        m.variance_se,
                        m.mse,
                        m.mse_se,
                        m.coverage,
                        m.coverage_se,
                        m.mean_ci_length,
                        m.mean_ci_length_se,
                        m.mean_t,
                        m.mean_t_se,
                    ]
                    .map(fmt_f64),
                );
            }
            Err(_) => {
                // too few successful records: counts only, moments left empty
                let ok = recs.iter().filter(|r| r.is_ok()).count();
                row.push(ok.to_string());
                row.push((recs.len() - ok).to_string());
                row.push(fmt_f64((recs.len() - ok) as f64 / recs.len() as f64));
                row.extend(std::iter::repeat_n(String::new(), 13));
            }
        }
        mw.write_record(&row).map_err(|e| io_err(&metrics_path, e))?;

        let ts: Vec<f64> = recs.iter().filter(|r| r.is_ok()).filter_map(|r| r.t_stat).collect();
        if let Ok(h) = silverman_bandwidth(&ts) {
            let grid = default_grid(&ts, h, a.grid_points);
            let dens = kernel_density_with_bandwidth(&ts, &grid, h);
            for (x, f) in grid.iter().zip(&dens) {
                dw.write_record([id.to_string(), method.to_string(), fmt_f64(h), fmt_f64(*x), fmt_f64(*f)])
                    .map_err(|e| io_err(&density_path, e))?;
            }
        }
    }
    mw.flush().map_err(|e| io_err(&metrics_path, e))?;
    dw.flush().map_err(|e| io_err(&density_path, e))?;
    writeln!(out, "wrote {} metric rows to {} and densities to {}", groups.len(), metrics_path.display(), density_path.display())
        .map_err(|e| CliError::Data(e.to_string()))
}

/// Columns of a numeric CSV file, by name.
pub struct Table {
    pub header: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<&[f64], CliError> {
        self.header
            .iter()
            .position(|h| h == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| CliError::Data(format!("column `{name}` not found in header")))
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| io_err(path, e))?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() {
        return Err(CliError::Data(format!("{}: empty header", path.display())));
    }
    let mut columns = vec![Vec::new(); header.len()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                CliError::Data(format!("row {}, column `{}`: non-numeric value `{cell}`", i + 1, header[j]))
            })?;
            if !v.is_finite() {
                return Err(CliError::Data(format!("row {}, column `{}`: non-finite value `{cell}`", i + 1, header[j])));
            }
            columns[j].push(v);
        }
    }
    Ok(Table { header, columns })
}

fn estimator_failure(err: EstimatorError, controls: &[String]) -> CliError {
    if let EstimatorError::Folds(folds) = &err {
        for f in &folds.0 {
            let column = match &f.failure {
                FoldFailure::Lasso { source: LassoError::ZeroVariance { column }, .. }
                | FoldFailure::Penalty(PenaltyError::Lasso(LassoError::ZeroVariance { column })) => Some(*column),
                _ => None,
            };
            if let Some(column) = column {
                return CliError::Data(format!(
                    "control `{}` has zero variance in the training sample of fold {}; drop it or check for duplicated constant columns",
                    controls[column], f.fold
                ));
            }
        }
    }
    match err {
        EstimatorError::InvalidInput(msg) => CliError::Data(msg),
        other => CliError::Numerical(other.to_string()),
    }
}

pub fn cmd_estimate(a: &EstimateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.folds < 2 {
        return Err(CliError::Usage("--folds must be at least 2".into()));
    }
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(CliError::Usage("--level must lie in (0, 1)".into()));
    }
    let table = read_table(&a.data)?;
    let d = table.column(&a.treatment)?.to_vec();
    let y = table.column(&a.outcome)?.to_vec();
    let controls: Vec<String> = match &a.controls {
        Some(c) => c.clone(),
        None => table.header.iter().filter(|h| **h != a.treatment && **h != a.outcome).cloned().collect(),
    };
    if controls.is_empty() {
        return Err(CliError::Data("no control columns".into()));
    }
    let cols = controls.iter().map(|c| table.column(c)).collect::<Result<Vec<_>, _>>()?;
    let (n, p) = (table.rows(), controls.len());
    if n < 4 * a.folds {
        return Err(CliError::Data(format!("too few rows: need at least 4K = {}, found {n}", 4 * a.folds)));
    }
    let x = Matrix::from_fn(n, p, |i, j| cols[j][i]);
    let data = Dataset::new(x, d, y).map_err(|e| CliError::Data(e.to_string()))?;
    let config = EstimateConfig {
        folds: a.folds,
        seed: a.seed,
        methods: vec![a.method],
        extra: a.extra,
        level: a.level,
        ..EstimateConfig::default()
    };
    let run = estimate(&data, &config).map_err(|e| estimator_failure(e, &controls))?;
    let est = &run.estimates[0];
    let row = [
        est.method.to_string(),
        fmt_f64(est.beta_hat),
        fmt_f64(est.se),
        fmt_f64(est.ci.0),
        fmt_f64(est.ci.1),
        n.to_string(),
        p.to_string(),
        a.folds.to_string(),
        a.seed.to_string(),
    ];
    writeln!(out, "{}", row.join(",")).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(path) = &a.out {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record(ESTIMATE_HEADER).map_err(|e| io_err(path, e))?;
        w.write_record(&row).map_err(|e| io_err(path, e))?;
        w.flush().map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Largest number of controls for the exact-moment check.
pub const ORTHO_CHECK_MAX_P: usize = 12;

/// Rows of the certification table as `(quantity, order, value)`.
pub fn ortho_check_rows(a: &OrthoCheckArgs) -> Result<Vec<(String, usize, f64)>, CliError> {
    if a.p < 2 || a.p > ORTHO_CHECK_MAX_P {
        return Err(CliError::Usage(format!("--p must lie in [2, {ORTHO_CHECK_MAX_P}], got {}", a.p)));
    }
    if !(1..=3).contains(&a.k) {
        return Err(CliError::Usage(format!("--k must be 1, 2 or 3, got {}", a.k)));
    }
    if !(0.0..1.0).contains(&a.rho) {
        return Err(CliError::Usage(format!("--rho must lie in [0, 1), got {}", a.rho)));
    }
    if a.h.is_some_and(|h| !(h > 0.0)) || a.directions == 0 {
        return Err(CliError::Usage("--h must be positive and --directions at least 1".into()));
    }
    let model = GaussianLinearModel::geometric(a.p, a.rho).map_err(|e| CliError::Usage(e.to_string()))?;
    let num = |e: crate::orthomoments::OrthoError| CliError::Numerical(e.to_string());
    let mut rows = Vec::new();

    let tl = model.triple_lasso_system();
    let f_tl = tl.system.scalar_fn();
    let grad = numeric_f_derivative(&f_tl, tl.beta0, &tl.eta0, 1, a.h.unwrap_or(default_step(1))).map_err(num)?;
    rows.push(("psi_tl_gradient".to_string(), 1, grad.max_abs()));
    let dirs = random_unit_directions(tl.eta0.len(), a.directions, CERTIFY_SEED);
    let report = certify_function(&*f_tl, tl.beta0, &tl.eta0, &dirs, 2, a.h);
    for m in 1..=2 {
        rows.push(("psi_tl_directional".to_string(), m, report.order(m)));
    }

    let dl = model.double_lasso_system();
    let hess = numeric_f_derivative(&dl.system.scalar_fn(), dl.beta0, &dl.eta0, 2, a.h.unwrap_or(default_step(2)))
        .map_err(num)?;
    let p = a.p;
    let cross = (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| hess.get(&[i, p + j]).abs()).fold(0.0, f64::max);
    rows.push(("psi_dl_cross_partial".to_string(), 2, cross));

    let base = model.system_for_order(a.k).expect("k validated above");
    let lifted = lift(&base.system, base.beta0, &base.eta0, a.k).map_err(num)?;
    let report =
        certify_orthogonality(&lifted, base.beta0, &lifted.eta_tilde0(), a.k, a.directions, a.h).map_err(num)?;
    for m in 1..=a.k {
        rows.push((format!("lifted_{}", base.name), m, report.order(m)));
    }
    Ok(rows)
}

pub fn cmd_ortho_check(a: &OrthoCheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let rows = ortho_check_rows(a)?;
    let io = |e: std::io::Error| CliError::Data(e.to_string());
    writeln!(out, "quantity,order,max_abs").map_err(io)?;
    for (q, m, v) in rows {
        writeln!(out, "{q},{m},{}", fmt_f64(v)).map_err(io)?;
    }
    Ok(())
}
