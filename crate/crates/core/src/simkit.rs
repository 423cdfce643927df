//! Monte Carlo harness: Gaussian Toeplitz designs, one-replication runner,
//! performance metrics and kernel densities of studentized statistics.
//!
//! Every replication draws from its own ChaCha streams keyed by
//! `(master_seed, design_id, rep)`, so a design's records do not depend on
//! how replications are scheduled across threads.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{
    estimate_method, fit_nuisances, make_folds, Dataset, EstimatorError, FoldFailure, Method, NuisanceOptions,
    PenaltyPlan,
};
use crate::lasso::LassoError;
use crate::nodewise::NodewiseError;
use crate::numkit::{cholesky, dot, sample_mvn, toeplitz_sigma, Matrix, NumError};
use crate::penalty::{fold_penalties, inv_normal_cdf, PenaltyConfig, PenaltyError};

/// Sub-stream for the control draws.
pub const STREAM_X: u64 = 0;
/// Sub-stream for the structural noise draws.
pub const STREAM_NOISE: u64 = 1;
/// Sub-stream for the fold shuffle.
pub const STREAM_FOLDS: u64 = 2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("need at least 2 successful records, got {ok} of {total}")]
    TooFewRecords { ok: usize, total: usize },
    #[error("bandwidth is zero: all values are equal")]
    ZeroBandwidth,
    #[error("invalid density input: {0}")]
    InvalidDensityInput(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
}

/// Sparsity pattern of the treatment equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaRegime {
    /// Two nonzero coefficients.
    Exact,
    /// Five nonzero coefficients.
    Intermediate,
    /// All coefficients nonzero.
    Approximate,
}

impl GammaRegime {
    pub const ALL: [GammaRegime; 3] = [GammaRegime::Exact, GammaRegime::Intermediate, GammaRegime::Approximate];

    pub fn sparsity(self, p: usize) -> usize {
        match self {
            GammaRegime::Exact => 2.min(p),
            GammaRegime::Intermediate => 5.min(p),
            GammaRegime::Approximate => p,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GammaRegime::Exact => "exact",
            GammaRegime::Intermediate => "intermediate",
            GammaRegime::Approximate => "approximate",
        }
    }
}

impl fmt::Display for GammaRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GammaRegime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(GammaRegime::Exact),
            "intermediate" => Ok(GammaRegime::Intermediate),
            "approximate" | "approx" => Ok(GammaRegime::Approximate),
            other => Err(format!("unknown regime `{other}` (expected exact, intermediate or approximate)")),
        }
    }
}

/// One cell of the simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub design_id: u64,
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub regime: GammaRegime,
    pub beta0: f64,
    pub sigma_nu: f64,
    pub sigma_eps: f64,
    pub folds: usize,
    pub reps: usize,
    pub master_seed: u64,
}

impl SimDesign {
    /// Design with unit coefficients, unit noise and five folds.
    pub fn new(design_id: u64, n: usize, p: usize, rho: f64, regime: GammaRegime, reps: usize, master_seed: u64) -> Self {
        Self { design_id, n, p, rho, regime, beta0: 1.0, sigma_nu: 1.0, sigma_eps: 1.0, folds: 5, reps, master_seed }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidDesign(format!("design {}: {msg}", self.design_id)));
        if self.p < 2 {
            return bad(format!("p must be at least 2, got {}", self.p));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        if self.n < 4 * self.folds {
            return bad(format!("need n >= 4K, got n = {}, K = {}", self.n, self.folds));
        }
        if self.regime == GammaRegime::Intermediate && self.p < 5 {
            return bad(format!("intermediate sparsity needs p >= 5, got {}", self.p));
        }
        if !(self.sigma_nu > 0.0 && self.sigma_eps > 0.0) || !self.beta0.is_finite() {
            return bad("noise scales must be positive and beta0 finite".into());
        }
        Ok(())
    }

    /// Observations per training sample, `⌊(K − 1)n/K⌋`.
    pub fn training_size(&self) -> usize {
        (self.folds - 1) * self.n / self.folds
    }
}

/// `θ0,j = 0.5^{j−1}`.
pub fn make_theta0(p: usize) -> Vec<f64> {
    (0..p).map(|j| 0.5f64.powi(j as i32)).collect()
}

/// Geometric coefficients truncated after the regime's sparsity level.
pub fn make_gamma0(p: usize, regime: GammaRegime) -> Vec<f64> {
    let s = regime.sparsity(p);
    (0..p).map(|j| if j < s { 0.5f64.powi(j as i32) } else { 0.0 }).collect()
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one replication.
pub fn replication_seed(master_seed: u64, design_id: u64, rep: u64) -> u64 {
    mix(mix(mix(master_seed) ^ design_id) ^ rep)
}

/// Independent stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Design quantities shared by all replications.
#[derive(Debug, Clone)]
pub struct PreparedDesign {
    pub design: SimDesign,
    pub gamma0: Vec<f64>,
    pub theta0: Vec<f64>,
    pub chol: Matrix,
    pub penalties: PenaltyPlan,
}

impl PreparedDesign {
    /// Node-wise levels use the design's conditional standard deviations
    /// and all levels are computed at the training-sample size.
    pub fn new(design: &SimDesign) -> Result<Self, SimError> {
        design.validate()?;
        let chol = cholesky(&toeplitz_sigma(design.p, design.rho)?)?;
        let penalties = fold_penalties(
            design.training_size(),
            design.p,
            design.rho,
            design.beta0,
            design.sigma_nu,
            design.sigma_eps,
            &PenaltyConfig::default(),
        )?;
        Ok(Self {
            design: design.clone(),
            gamma0: make_gamma0(design.p, design.regime),
            theta0: make_theta0(design.p),
            chol,
            penalties: PenaltyPlan::Fixed(penalties),
        })
    }

    /// One dataset: `X` from the control stream, then `(ν_i, ε_i)` row by
    /// row from the noise stream.
    pub fn draw(&self, seed: u64) -> Dataset {
        let d = &self.design;
        let x = sample_mvn(&self.chol, d.n, &mut stream_rng(seed, STREAM_X));
        let mut noise = stream_rng(seed, STREAM_NOISE);
        let mut dv = Vec::with_capacity(d.n);
        let mut yv = Vec::with_capacity(d.n);
        for i in 0..d.n {
            let nu: f64 = noise.sample(StandardNormal);
            let eps: f64 = noise.sample(StandardNormal);
            let xi = x.row(i);
            let di = dot(xi, &self.gamma0) + d.sigma_nu * nu;
            dv.push(di);
            yv.push(d.beta0 * di + dot(xi, &self.theta0) + d.sigma_eps * eps);
        }
        Dataset::new(x, dv, yv).expect("simulated columns have matching lengths")
    }
}

/// Draws the dataset of replication `rep`.
pub fn draw_dataset(design: &SimDesign, rep: u64) -> Result<Dataset, SimError> {
    let prepared = PreparedDesign::new(design)?;
    Ok(prepared.draw(replication_seed(design.master_seed, design.design_id, rep)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub design_id: u64,
    pub rep_id: u64,
    pub method: Method,
    pub beta_hat: Option<f64>,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub ci_length: Option<f64>,
    pub t_stat: Option<f64>,
    pub runtime_ms: Option<f64>,
    pub failure: Option<String>,
}

impl ReplicationRecord {
    fn failed(design_id: u64, rep_id: u64, method: Method, tag: String) -> Self {
        Self {
            design_id,
            rep_id,
            method,
            beta_hat: None,
            se: None,
            covered: None,
            ci_length: None,
            t_stat: None,
            runtime_ms: None,
            failure: Some(tag),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none() && self.beta_hat.is_some()
    }
}

/// Knobs that are not part of the design itself.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReplicationOptions {
    /// Record wall-clock time; off by default so output stays reproducible.
    pub timing: bool,
    /// Empty triple support, which turns the triple arm into the double one.
    pub empty_support: bool,
}

/// Short machine-readable label for a failed estimate.
pub fn failure_tag(err: &EstimatorError) -> String {
    match err {
        EstimatorError::Folds(folds) => match folds.0.first().map(|f| &f.failure) {
            Some(FoldFailure::Lasso { source: LassoError::NotConverged { .. }, .. }) => "lasso_not_converged",
            Some(FoldFailure::Lasso { .. }) => "lasso_error",
            Some(FoldFailure::Nodewise(NodewiseError::DegenerateVariance { .. })) => "nodewise_degenerate",
            Some(FoldFailure::Nodewise(NodewiseError::Lasso { source: LassoError::NotConverged { .. }, .. })) => {
                "nodewise_not_converged"
            }
            Some(FoldFailure::Nodewise(_)) => "nodewise_error",
            Some(FoldFailure::Penalty(_)) => "penalty_error",
            Some(FoldFailure::Denominator { .. }) => "denominator_floor",
            None => "fold_error",
        },
        EstimatorError::DegenerateVariance { .. } => "degenerate_variance",
        EstimatorError::InvalidInput(_) => "invalid_input",
        EstimatorError::Penalty(_) => "penalty_error",
    }
    .to_string()
}

/// Both estimators on one simulated dataset with shared folds and shared
/// `(γ̂, φ̂)`. Returns the double record first. Failures are recorded in
/// the records and never abort.
pub fn run_replication(prepared: &PreparedDesign, rep: u64, opts: ReplicationOptions) -> [ReplicationRecord; 2] {
    let start = Instant::now();
    let d = &prepared.design;
    let seed = replication_seed(d.master_seed, d.design_id, rep);
    let data = prepared.draw(seed);
    let plan = match make_folds(d.n, d.folds, &mut stream_rng(seed, STREAM_FOLDS)) {
        Ok(plan) => plan,
        Err(e) => {
            let tag = failure_tag(&e);
            return [
                ReplicationRecord::failed(d.design_id, rep, Method::Double, tag.clone()),
                ReplicationRecord::failed(d.design_id, rep, Method::Triple, tag),
            ];
        }
    };
    let nuisance_opts = |method| NuisanceOptions {
        penalties: &prepared.penalties,
        method,
        extra: 0,
        empty_support: opts.empty_support,
    };
    let z = inv_normal_cdf(0.975).expect("valid level");

    let record = |method: Method, result: Result<crate::estimators::DmlEstimate, EstimatorError>| match result {
        Ok(est) => {
            let t = (est.beta_hat - d.beta0) / est.se;
            ReplicationRecord {
                design_id: d.design_id,
                rep_id: rep,
                method,
                beta_hat: Some(est.beta_hat),
                se: Some(est.se),
                covered: Some((est.beta_hat - d.beta0).abs() <= z * est.se),
                ci_length: Some(2.0 * z * est.se),
                t_stat: Some(t),
                runtime_ms: None,
                failure: None,
            }
        }
        Err(e) => ReplicationRecord::failed(d.design_id, rep, method, failure_tag(&e)),
    };

    let mut out = match fit_nuisances(&data, &plan, nuisance_opts(Method::Triple)) {
        Ok(nuis) => [Method::Double, Method::Triple]
            .map(|m| record(m, estimate_method(&data, &plan, &nuis, m, 0.95))),
        Err(triple_err) => {
            // the treatment and outcome fits are deterministic, so the double
            // arm can still be rescued when only the node-wise stage failed
            let double = fit_nuisances(&data, &plan, nuisance_opts(Method::Double))
                .and_then(|nuis| estimate_method(&data, &plan, &nuis, Method::Double, 0.95));
            [record(Method::Double, double), record(Method::Triple, Err(triple_err))]
        }
    };
    if opts.timing {
        let ms = start.elapsed().as_secs_f64() * 1e3;
        out.iter_mut().for_each(|r| r.runtime_ms = Some(ms));
    }
    out
}

/// All replications of one design, sorted by `(rep, method)`.
pub fn run_design(design: &SimDesign, opts: ReplicationOptions) -> Result<Vec<ReplicationRecord>, SimError> {
    let prepared = PreparedDesign::new(design)?;
    let mut records: Vec<ReplicationRecord> = (0..design.reps as u64)
        .into_par_iter()
        .flat_map_iter(|rep| run_replication(&prepared, rep, opts))
        .collect();
    sort_records(&mut records);
    Ok(records)
}

/// Every design in order; all designs are validated before any work.
pub fn run_grid(designs: &[SimDesign], opts: ReplicationOptions) -> Result<Vec<ReplicationRecord>, SimError> {
    let prepared = designs.iter().map(PreparedDesign::new).collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, u64)> =
        prepared.iter().enumerate().flat_map(|(i, p)| (0..p.design.reps as u64).map(move |r| (i, r))).collect();
    let mut records: Vec<ReplicationRecord> =
        jobs.into_par_iter().flat_map_iter(|(i, rep)| run_replication(&prepared[i], rep, opts)).collect();
    sort_records(&mut records);
    Ok(records)
}

pub fn sort_records(records: &mut [ReplicationRecord]) {
    records.sort_by(|a, b| (a.design_id, a.rep_id, a.method).cmp(&(b.design_id, b.rep_id, b.method)));
}

/// Performance summary of one design and method, each with its Monte
/// Carlo standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub n_ok: usize,
    pub n_failed: usize,
    pub failure_rate: f64,
    pub mean_beta: f64,
    pub sq_bias: f64,
    pub sq_bias_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub coverage: f64,
    pub coverage_se: f64,
    pub mean_ci_length: f64,
    pub mean_ci_length_se: f64,
    pub mean_t: f64,
    pub mean_t_se: f64,
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let r = v.len() as f64;
    let m = v.iter().sum::<f64>() / r;
    let s2 = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (r - 1.0);
    (m, (s2 / r).sqrt())
}

/// Metrics over the successful records.
///
/// Moments use `1/R` so that `mse = sq_bias + variance` holds exactly. The
/// squared-bias error band comes from the delta method, `2|bias|·se(mean)`,
/// and coverage uses the binomial formula.
pub fn compute_metrics(records: &[ReplicationRecord], beta0: f64) -> Result<MetricsRow, SimError> {
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let (n_ok, total) = (ok.len(), records.len());
    if n_ok < 2 {
        return Err(SimError::TooFewRecords { ok: n_ok, total });
    }
    let r = n_ok as f64;
    let betas: Vec<f64> = ok.iter().filter_map(|x| x.beta_hat).collect();
    let (mean_beta, mean_se) = mean_and_se(&betas);
    let bias = mean_beta - beta0;
    let sq_bias = bias * bias;
    let centered2: Vec<f64> = betas.iter().map(|b| (b - mean_beta).powi(2)).collect();
    let variance = centered2.iter().sum::<f64>() / r;
    let m4 = centered2.iter().map(|c| c * c).sum::<f64>() / r;
    let variance_se = ((m4 - variance * variance).max(0.0) / r).sqrt();
    let errors2: Vec<f64> = betas.iter().map(|b| (b - beta0).powi(2)).collect();
    let (_, mse_se) = mean_and_se(&errors2);

    let coverage = ok.iter().filter(|x| x.covered == Some(true)).count() as f64 / r;
    let lengths: Vec<f64> = ok.iter().map(|x| x.ci_length.unwrap_or(f64::NAN)).collect();
    let (mean_ci_length, mean_ci_length_se) = mean_and_se(&lengths);
    let ts: Vec<f64> = ok.iter().map(|x| x.t_stat.unwrap_or(f64::NAN)).collect();
    let (mean_t, mean_t_se) = mean_and_se(&ts);

    Ok(MetricsRow {
        n_ok,
        n_failed: total - n_ok,
        failure_rate: (total - n_ok) as f64 / total as f64,
        mean_beta,
        sq_bias,
        sq_bias_se: 2.0 * bias.abs() * mean_se,
        variance,
        variance_se,
        mse: sq_bias + variance,
        mse_se,
        coverage,
        coverage_se: (coverage * (1.0 - coverage) / r).sqrt(),
        mean_ci_length,
        mean_ci_length_se,
        mean_t,
        mean_t_se,
    })
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Rule-of-thumb bandwidth `0.9·min(σ̂, IQR/1.34)·R^{−1/5}`; falls back to
/// `σ̂` when the interquartile range is zero.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64, SimError> {
    if values.len() < 2 || values.iter().any(|v| !v.is_finite()) {
        return Err(SimError::InvalidDensityInput("need at least 2 finite values".into()));
    }
    if values.iter().all(|v| *v == values[0]) {
        return Err(SimError::ZeroBandwidth);
    }
    let r = values.len() as f64;
    let m = values.iter().sum::<f64>() / r;
    let sd = (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (r - 1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_type7(&sorted, 0.75) - quantile_type7(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * r.powf(-0.2);
    if !(h > 0.0) {
        return Err(SimError::ZeroBandwidth);
    }
    Ok(h)
}

/// Gaussian kernel density of `values` on `grid`.
pub fn kernel_density(values: &[f64], grid: &[f64]) -> Result<Vec<f64>, SimError> {
    let h = silverman_bandwidth(values)?;
    Ok(kernel_density_with_bandwidth(values, grid, h))
}

pub fn kernel_density_with_bandwidth(values: &[f64], grid: &[f64], h: f64) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| values.iter().map(|t| (-0.5 * ((x - t) / h).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

/// `points` equally spaced values over `[min − 3h, max + 3h]`.
pub fn default_grid(values: &[f64], h: f64, points: usize) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| if i + 1 == points { hi } else { lo + step * i as f64 }).collect()
}
