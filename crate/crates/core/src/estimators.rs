//! Cross-fitted double and triple Lasso estimates of the treatment effect.
//!
//! Both estimators share the fold split and the two Lasso nuisance fits
//! (treatment on controls, outcome on controls). The triple estimator adds a
//! correction built from node-wise rows of the inverse Gram matrix, restricted
//! to the selected treatment-equation support.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lasso::{fit_lasso, LassoError, LassoFit, LassoProblem};
use crate::nodewise::{apply_theta, NodewiseCache, NodewiseError, SparsifiedTheta};
use crate::numkit::{dot, Matrix};
use crate::penalty::{bcch_lambda, inv_normal_cdf, refined_lambda, FoldPenalties, PenaltyConfig, PenaltyError};

/// Relative floor for fold denominators and the score variance, as a
/// fraction of the mean squared treatment.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{0}")]
    Folds(FoldErrors),
    #[error("mean squared treatment residual {value:e} below floor {floor:e}")]
    DegenerateVariance { value: f64, floor: f64 },
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
}

#[derive(Debug, Error)]
pub enum FoldFailure {
    #[error("{target} regression: {source}")]
    Lasso { target: &'static str, source: LassoError },
    #[error("node-wise regression: {0}")]
    Nodewise(#[from] NodewiseError),
    #[error("penalty: {0}")]
    Penalty(#[from] PenaltyError),
    #[error("denominator {value:e} below floor {floor:e}")]
    Denominator { value: f64, floor: f64 },
}

#[derive(Debug)]
pub struct FoldError {
    pub fold: usize,
    pub failure: FoldFailure,
}

/// All fold failures from one run, in fold order.
#[derive(Debug)]
pub struct FoldErrors(pub Vec<FoldError>);

impl fmt::Display for FoldErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|e| format!("fold {}: {}", e.fold, e.failure)).collect();
        write!(f, "{} fold(s) failed: {}", self.0.len(), parts.join("; "))
    }
}

fn fold_err(fold: usize, failure: FoldFailure) -> EstimatorError {
    EstimatorError::Folds(FoldErrors(vec![FoldError { fold, failure }]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub d: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Matrix, d: Vec<f64>, y: Vec<f64>) -> Result<Self, EstimatorError> {
        let n = x.rows();
        if d.len() != n || y.len() != n {
            return Err(EstimatorError::InvalidInput(format!(
                "X has {n} rows but D has {} and Y has {} entries",
                d.len(),
                y.len()
            )));
        }
        if d.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(EstimatorError::InvalidInput("non-finite treatment or outcome".into()));
        }
        Ok(Self { x, d, y })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    k: usize,
    assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn from_assignment(k: usize, assignment: Vec<usize>) -> Result<Self, EstimatorError> {
        let mut sizes = vec![0usize; k];
        for &a in &assignment {
            if a >= k {
                return Err(EstimatorError::InvalidInput(format!("fold index {a} out of range for K = {k}")));
            }
            sizes[a] += 1;
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(EstimatorError::InvalidInput("every fold must be nonempty".into()));
        }
        Ok(Self { k, assignment })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn holdout(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Uniformly random balanced split: a random permutation dealt round-robin.
pub fn make_folds<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<FoldPlan, EstimatorError> {
    if k < 2 || n < 2 * k {
        return Err(EstimatorError::InvalidInput(format!("need K >= 2 and n >= 2K, got n = {n}, K = {k}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut assignment = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(FoldPlan { k, assignment })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Double,
    Triple,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Double => "double",
            Method::Triple => "triple",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "double" => Ok(Method::Double),
            "triple" => Ok(Method::Triple),
            other => Err(format!("unknown method `{other}` (expected double or triple)")),
        }
    }
}

/// How penalty levels are chosen for each training fold.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyPlan {
    /// Known levels, identical across folds.
    Fixed(FoldPenalties),
    /// Plug-in levels with noise scales estimated by one pilot refit.
    Feasible(PenaltyConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldNuisance {
    pub gamma_intercept: f64,
    pub gamma_hat: Vec<f64>,
    pub phi_intercept: f64,
    pub phi_hat: Vec<f64>,
    pub theta_hat: SparsifiedTheta,
    /// Selected treatment support plus any extra indices, ascending.
    pub support: Vec<usize>,
    pub nodewise_fits: usize,
}

impl FoldNuisance {
    /// Nuisance with known coefficients, no intercepts and the zero operator.
    pub fn known(gamma: Vec<f64>, phi: Vec<f64>) -> Self {
        let p = gamma.len();
        let support = (0..p).filter(|&j| gamma[j] != 0.0).collect();
        Self {
            gamma_intercept: 0.0,
            gamma_hat: gamma,
            phi_intercept: 0.0,
            phi_hat: phi,
            theta_hat: SparsifiedTheta::empty(p),
            support,
            nodewise_fits: 0,
        }
    }

    pub fn nu_residual(&self, x_row: &[f64], d: f64) -> f64 {
        d - self.gamma_intercept - dot(x_row, &self.gamma_hat)
    }

    pub fn y_residual(&self, x_row: &[f64], y: f64) -> f64 {
        y - self.phi_intercept - dot(x_row, &self.phi_hat)
    }
}

/// The `L` entries of largest magnitude outside `existing`; ties go to the
/// smaller index.
pub fn select_extra(s: &[f64], existing: &[usize], l: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..s.len()).filter(|j| !existing.contains(j)).collect();
    candidates.sort_by(|&a, &b| s[b].abs().total_cmp(&s[a].abs()).then(a.cmp(&b)));
    candidates.truncate(l);
    candidates
}

fn lasso_fit(x: &Matrix, y: &[f64], lambda: f64, target: &'static str) -> Result<LassoFit, FoldFailure> {
    let problem = LassoProblem::new(x, y, lambda);
    fit_lasso(&problem).map_err(|source| FoldFailure::Lasso { target, source })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceOptions<'a> {
    pub penalties: &'a PenaltyPlan,
    pub method: Method,
    pub extra: usize,
    /// Forces the triple support to be empty, making the correction vanish.
    pub empty_support: bool,
}

/// Fits `(γ̂, φ̂)` on the training part of `fold` and, for the triple method,
/// the node-wise rows indexed by the selected support.
pub fn fit_fold_nuisance(
    data: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    opts: NuisanceOptions<'_>,
) -> Result<FoldNuisance, EstimatorError> {
    fit_fold_inner(data, plan, fold, opts).map_err(|f| fold_err(fold, f))
}

fn fit_fold_inner(
    data: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    opts: NuisanceOptions<'_>,
) -> Result<FoldNuisance, FoldFailure> {
    let train = plan.training(fold);
    let x = data.x.select_rows(&train);
    let d: Vec<f64> = train.iter().map(|&i| data.d[i]).collect();
    let y: Vec<f64> = train.iter().map(|&i| data.y[i]).collect();
    let (n, p) = (x.rows(), x.cols());

    let (lambda_gamma, lambda_phi) = match opts.penalties {
        PenaltyPlan::Fixed(f) => (f.lambda_gamma, f.lambda_phi),
        PenaltyPlan::Feasible(cfg) => {
            let base = bcch_lambda(n, p, cfg)?;
            (refined_lambda(&x, &d, base, true, true)?, refined_lambda(&x, &y, base, true, true)?)
        }
    };
    let gamma = lasso_fit(&x, &d, lambda_gamma, "treatment")?;
    let phi = lasso_fit(&x, &y, lambda_phi, "outcome")?;

    let mut nuis = FoldNuisance {
        gamma_intercept: gamma.intercept,
        gamma_hat: gamma.coefs,
        phi_intercept: phi.intercept,
        phi_hat: phi.coefs,
        theta_hat: SparsifiedTheta::empty(p),
        support: gamma.support,
        nodewise_fits: 0,
    };
    if opts.method == Method::Double {
        return Ok(nuis);
    }
    if opts.empty_support {
        nuis.support.clear();
        return Ok(nuis);
    }

    let mut cache = NodewiseCache::new(&x);
    let mut support = nuis.support.clone();
    if opts.extra > 0 {
        let all: Vec<usize> = (0..p).collect();
        let lambdas = nodewise_lambdas(&x, &all, opts.penalties)?;
        cache.ensure(&all, |j| lambdas[j])?;
        let b_train: Vec<f64> = {
            let mut b = vec![0.0; p];
            for i in 0..n {
                let r = nuis.nu_residual(x.row(i), d[i]);
                for (bj, xij) in b.iter_mut().zip(x.row(i)) {
                    *bj += xij * r;
                }
            }
            b.iter().map(|v| v / n as f64).collect()
        };
        let s = apply_theta(&cache.theta(&all), &b_train);
        support.extend(select_extra(&s, &support, opts.extra));
        support.sort_unstable();
    } else {
        let lambdas = nodewise_lambdas(&x, &support, opts.penalties)?;
        cache.ensure(&support, |j| lambdas[j])?;
    }
    nuis.theta_hat = cache.theta(&support);
    nuis.support = support;
    nuis.nodewise_fits = cache.fits();
    Ok(nuis)
}

/// Node-wise penalty per control; entries not in `indices` are NaN.
fn nodewise_lambdas(x: &Matrix, indices: &[usize], plan: &PenaltyPlan) -> Result<Vec<f64>, FoldFailure> {
    let p = x.cols();
    let mut out = vec![f64::NAN; p];
    match plan {
        PenaltyPlan::Fixed(f) => {
            if f.lambda_psi.len() != p {
                return Err(FoldFailure::Penalty(PenaltyError::InvalidArgument(format!(
                    "{} node-wise penalties for {p} controls",
                    f.lambda_psi.len()
                ))));
            }
            for &j in indices {
                out[j] = f.lambda_psi[j];
            }
        }
        PenaltyPlan::Feasible(cfg) => {
            let base = bcch_lambda(x.rows(), p - 1, cfg)?;
            let levels: Vec<(usize, Result<f64, PenaltyError>)> = indices
                .par_iter()
                .map(|&j| (j, refined_lambda(&x.without_column(j), &x.column(j), base, false, false)))
                .collect();
            for (j, level) in levels {
                out[j] = level?;
            }
        }
    }
    Ok(out)
}

/// Holdout moments shared by both fold estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutMoments {
    /// `E[(Y − Xᵀφ̂)(D − Xᵀγ̂)]`
    pub a: f64,
    /// `E[(D − Xᵀγ̂)²]`
    pub c: f64,
    pub b_y: Vec<f64>,
    pub b_d: Vec<f64>,
    /// `E[D²]`, the reference for the denominator floor.
    pub d2: f64,
}

pub fn holdout_moments(data: &Dataset, plan: &FoldPlan, fold: usize, nuis: &FoldNuisance) -> HoldoutMoments {
    let hold = plan.holdout(fold);
    let p = data.p();
    let m = hold.len() as f64;
    let (mut a, mut c, mut d2) = (0.0, 0.0, 0.0);
    let mut b_y = vec![0.0; p];
    let mut b_d = vec![0.0; p];
    for &i in &hold {
        let xi = data.x.row(i);
        let nu = nuis.nu_residual(xi, data.d[i]);
        let r = nuis.y_residual(xi, data.y[i]);
        a += r * nu;
        c += nu * nu;
        d2 += data.d[i] * data.d[i];
        for j in 0..p {
            b_y[j] += xi[j] * r;
            b_d[j] += xi[j] * nu;
        }
    }
    b_y.iter_mut().chain(b_d.iter_mut()).for_each(|v| *v /= m);
    HoldoutMoments { a: a / m, c: c / m, b_y, b_d, d2: d2 / m }
}

/// Numerator and denominator of one fold estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostic {
    pub numerator: f64,
    pub denominator: f64,
    pub holdout_size: usize,
    pub support_size: usize,
}

fn checked_ratio(fold: usize, num: f64, den: f64, d2: f64) -> Result<f64, EstimatorError> {
    let floor = DENOMINATOR_FLOOR * d2;
    if !(den >= floor) || den <= 0.0 {
        return Err(fold_err(fold, FoldFailure::Denominator { value: den, floor }));
    }
    Ok(num / den)
}

fn double_parts(m: &HoldoutMoments) -> (f64, f64) {
    (m.a, m.c)
}

fn triple_parts(m: &HoldoutMoments, theta: &SparsifiedTheta) -> (f64, f64) {
    let t = apply_theta(theta, &m.b_d);
    (m.a - dot(&m.b_y, &t), m.c - dot(&m.b_d, &t))
}

pub fn fold_beta_double(data: &Dataset, plan: &FoldPlan, fold: usize, nuis: &FoldNuisance) -> Result<f64, EstimatorError> {
    let m = holdout_moments(data, plan, fold, nuis);
    let (num, den) = double_parts(&m);
    checked_ratio(fold, num, den, m.d2)
}

pub fn fold_beta_triple(data: &Dataset, plan: &FoldPlan, fold: usize, nuis: &FoldNuisance) -> Result<f64, EstimatorError> {
    let m = holdout_moments(data, plan, fold, nuis);
    let (num, den) = triple_parts(&m, &nuis.theta_hat);
    checked_ratio(fold, num, den, m.d2)
}

/// DML1 aggregation: unweighted mean of the fold estimates.
pub fn aggregate(fold_betas: &[f64]) -> f64 {
    fold_betas.iter().sum::<f64>() / fold_betas.len() as f64
}

/// Cross-fitted treatment residuals `ν̂` and outcome residuals `Y − Xᵀφ̂`.
pub fn cross_fitted_residuals(data: &Dataset, plan: &FoldPlan, nuisances: &[FoldNuisance]) -> (Vec<f64>, Vec<f64>) {
    let n = data.n();
    let mut nu = vec![0.0; n];
    let mut r = vec![0.0; n];
    for i in 0..n {
        let nuis = &nuisances[plan.assignment()[i]];
        let xi = data.x.row(i);
        nu[i] = nuis.nu_residual(xi, data.d[i]);
        r[i] = nuis.y_residual(xi, data.y[i]);
    }
    (nu, r)
}

/// `√(V̂/n)` with `V̂ = mean((ε̂ν̂)²) / mean(ν̂²)²` and `ε̂ = r − β̂ν̂`.
/// `d2` is the mean squared treatment used for the degeneracy floor.
pub fn score_se_from_residuals(nu: &[f64], r: &[f64], beta_hat: f64, d2: f64) -> Result<f64, EstimatorError> {
    let n = nu.len() as f64;
    let nu2 = nu.iter().map(|v| v * v).sum::<f64>() / n;
    let floor = DENOMINATOR_FLOOR * d2;
    if !(nu2 >= floor) || nu2 <= 0.0 {
        return Err(EstimatorError::DegenerateVariance { value: nu2, floor });
    }
    let meat = nu
        .iter()
        .zip(r)
        .map(|(v, ri)| {
            let s = (ri - beta_hat * v) * v;
            s * s
        })
        .sum::<f64>()
        / n;
    let se = (meat / (nu2 * nu2) / n).sqrt();
    if !(se > 0.0 && se.is_finite()) {
        return Err(EstimatorError::DegenerateVariance { value: se, floor: 0.0 });
    }
    Ok(se)
}

pub fn score_se(data: &Dataset, plan: &FoldPlan, nuisances: &[FoldNuisance], beta_hat: f64) -> Result<f64, EstimatorError> {
    let (nu, r) = cross_fitted_residuals(data, plan, nuisances);
    let d2 = data.d.iter().map(|v| v * v).sum::<f64>() / data.n() as f64;
    score_se_from_residuals(&nu, &r, beta_hat, d2)
}

pub fn confidence_interval(beta_hat: f64, se: f64, level: f64) -> Result<(f64, f64), EstimatorError> {
    if !(se > 0.0) || !(level > 0.0 && level < 1.0) {
        return Err(EstimatorError::InvalidInput(format!("need se > 0 and level in (0,1), got {se}, {level}")));
    }
    let z = inv_normal_cdf(1.0 - (1.0 - level) / 2.0)?;
    Ok((beta_hat - z * se, beta_hat + z * se))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlEstimate {
    pub method: Method,
    pub beta_hat: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub level: f64,
    pub fold_betas: Vec<f64>,
    pub fold_diagnostics: Vec<FoldDiagnostic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateConfig {
    pub folds: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub extra: usize,
    pub level: f64,
    pub penalties: PenaltyPlan,
    pub empty_support: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            methods: vec![Method::Double, Method::Triple],
            extra: 0,
            level: 0.95,
            penalties: PenaltyPlan::Feasible(PenaltyConfig::default()),
            empty_support: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRun {
    /// One estimate per requested method, in request order.
    pub estimates: Vec<DmlEstimate>,
    pub nuisances: Vec<FoldNuisance>,
    pub nodewise_fits: usize,
}

impl EstimateRun {
    pub fn get(&self, method: Method) -> Option<&DmlEstimate> {
        self.estimates.iter().find(|e| e.method == method)
    }
}

/// Full pipeline with folds drawn from `config.seed`.
pub fn estimate(data: &Dataset, config: &EstimateConfig) -> Result<EstimateRun, EstimatorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let plan = make_folds(data.n(), config.folds, &mut rng)?;
    estimate_with_plan(data, &plan, config)
}

pub fn estimate_with_plan(data: &Dataset, plan: &FoldPlan, config: &EstimateConfig) -> Result<EstimateRun, EstimatorError> {
    if plan.n() != data.n() {
        return Err(EstimatorError::InvalidInput(format!("fold plan covers {} rows, data has {}", plan.n(), data.n())));
    }
    if data.n() < 4 * plan.k() {
        return Err(EstimatorError::InvalidInput(format!("need n >= 4K, got n = {}, K = {}", data.n(), plan.k())));
    }
    if config.methods.is_empty() {
        return Err(EstimatorError::InvalidInput("no method requested".into()));
    }
    let fit_method = if config.methods.contains(&Method::Triple) { Method::Triple } else { Method::Double };
    let opts = NuisanceOptions {
        penalties: &config.penalties,
        method: fit_method,
        extra: config.extra,
        empty_support: config.empty_support,
    };
    let nuisances = fit_nuisances(data, plan, opts)?;
    let estimates = config
        .methods
        .iter()
        .map(|&method| estimate_method(data, plan, &nuisances, method, config.level))
        .collect::<Result<Vec<_>, _>>()?;
    let nodewise_fits = nuisances.iter().map(|n| n.nodewise_fits).sum();
    Ok(EstimateRun { estimates, nuisances, nodewise_fits })
}

/// Nuisances for every fold, fitted in parallel. All fold failures are
/// reported together.
pub fn fit_nuisances(data: &Dataset, plan: &FoldPlan, opts: NuisanceOptions<'_>) -> Result<Vec<FoldNuisance>, EstimatorError> {
    let results: Vec<Result<FoldNuisance, FoldFailure>> =
        (0..plan.k()).into_par_iter().map(|k| fit_fold_inner(data, plan, k, opts)).collect();
    let mut nuisances = Vec::with_capacity(plan.k());
    let mut failures = Vec::new();
    for (fold, res) in results.into_iter().enumerate() {
        match res {
            Ok(n) => nuisances.push(n),
            Err(failure) => failures.push(FoldError { fold, failure }),
        }
    }
    if !failures.is_empty() {
        return Err(EstimatorError::Folds(FoldErrors(failures)));
    }
    Ok(nuisances)
}

/// Cross-fitted estimate for one method from already fitted nuisances.
pub fn estimate_method(
    data: &Dataset,
    plan: &FoldPlan,
    nuisances: &[FoldNuisance],
    method: Method,
    level: f64,
) -> Result<DmlEstimate, EstimatorError> {
    if nuisances.len() != plan.k() {
        return Err(EstimatorError::InvalidInput(format!("{} nuisances for {} folds", nuisances.len(), plan.k())));
    }
    let sizes = plan.sizes();
    let mut fold_betas = Vec::with_capacity(plan.k());
    let mut fold_diagnostics = Vec::with_capacity(plan.k());
    let mut failures = Vec::new();
    for (k, nuis) in nuisances.iter().enumerate() {
        let m = holdout_moments(data, plan, k, nuis);
        let (num, den, support_size) = match method {
            Method::Double => {
                let (a, b) = double_parts(&m);
                (a, b, 0)
            }
            Method::Triple => {
                let (a, b) = triple_parts(&m, &nuis.theta_hat);
                (a, b, nuis.support.len())
            }
        };
        match checked_ratio(k, num, den, m.d2) {
            Ok(beta) => fold_betas.push(beta),
            Err(EstimatorError::Folds(FoldErrors(mut e))) => failures.append(&mut e),
            Err(other) => return Err(other),
        }
        fold_diagnostics.push(FoldDiagnostic { numerator: num, denominator: den, holdout_size: sizes[k], support_size });
    }
    if !failures.is_empty() {
        return Err(EstimatorError::Folds(FoldErrors(failures)));
    }
    let beta_hat = aggregate(&fold_betas);
    let se = score_se(data, plan, nuisances, beta_hat)?;
    let ci = confidence_interval(beta_hat, se, level)?;
    Ok(DmlEstimate { method, beta_hat, se, ci, level, fold_betas, fold_diagnostics })
}
