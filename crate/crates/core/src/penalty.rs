//! Plug-in penalty levels.
//!
//! The baseline level for a Lasso with `n_obs` observations and `p_pen`
//! penalized coefficients is
//!
//! ```text
//! λ(n_obs, p_pen) = c / √n_obs · Φ⁻¹(1 − α(n_obs, p_pen) / (2 p_pen)),
//! α(n_obs, p_pen) = 0.1 / log(max(p_pen, n_obs)),   c = 1.1,
//! ```
//!
//! stated for the half-squared-loss objective used in [`crate::lasso`]. It is
//! multiplied by the noise standard deviation of the regression at hand.

use thiserror::Error;

use crate::lasso::{fit_lasso, LassoError, LassoProblem};
use crate::numkit::{dot, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PenaltyError {
    #[error("invalid penalty argument: {0}")]
    InvalidArgument(String),
    #[error("pilot fit for penalty refinement failed: {0}")]
    Lasso(#[from] LassoError),
}

/// Coefficients of Acklam's rational approximation to Φ⁻¹.
const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549671492935183e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn acklam_lower(p: f64) -> f64 {
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Φ⁻¹(q): rational starting point refined by two Halley steps on the CDF.
///
/// The refinement always runs on the lower tail, so quantiles close to 1 keep
/// full absolute accuracy.
pub fn inv_normal_cdf(q: f64) -> Result<f64, PenaltyError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(PenaltyError::InvalidArgument(format!("quantile level {q} outside (0, 1)")));
    }
    if q == 0.5 {
        return Ok(0.0);
    }
    let (p, sign) = if q < 0.5 { (q, 1.0) } else { (1.0 - q, -1.0) };
    let mut x = acklam_lower(p);
    let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
    for _ in 0..2 {
        let e = normal_cdf(x) - p;
        let u = e * sqrt_2pi * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(sign * x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaRule {
    /// α = numerator / log(max(p_pen, n_obs)).
    LogMax { numerator: f64 },
    Constant(f64),
}

impl AlphaRule {
    pub fn alpha(&self, n_obs: usize, p_pen: usize) -> f64 {
        match *self {
            AlphaRule::LogMax { numerator } => numerator / (n_obs.max(p_pen) as f64).ln(),
            AlphaRule::Constant(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub c: f64,
    pub alpha_rule: AlphaRule,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { c: 1.1, alpha_rule: AlphaRule::LogMax { numerator: 0.1 } }
    }
}

pub fn bcch_lambda(n_obs: usize, p_pen: usize, cfg: &PenaltyConfig) -> Result<f64, PenaltyError> {
    if n_obs < 2 || p_pen < 1 {
        return Err(PenaltyError::InvalidArgument(format!(
            "need n_obs >= 2 and p_pen >= 1, got ({n_obs}, {p_pen})"
        )));
    }
    if !(cfg.c > 0.0) {
        return Err(PenaltyError::InvalidArgument(format!("multiplier c = {} must be positive", cfg.c)));
    }
    let alpha = cfg.alpha_rule.alpha(n_obs, p_pen);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PenaltyError::InvalidArgument(format!("alpha = {alpha} outside (0, 1)")));
    }
    let z = inv_normal_cdf(1.0 - alpha / (2.0 * p_pen as f64))?;
    Ok(cfg.c / (n_obs as f64).sqrt() * z)
}

/// Conditional standard deviation of control `j` (0-based) given the others
/// under the Toeplitz design `ρ^|j−k|`.
pub fn sigma_cond(j: usize, p: usize, rho: f64) -> Result<f64, PenaltyError> {
    if j >= p {
        return Err(PenaltyError::InvalidArgument(format!("index {j} out of range for p = {p}")));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(PenaltyError::InvalidArgument(format!("rho = {rho} outside [0, 1)")));
    }
    let interior = j > 0 && j + 1 < p;
    let var = (1.0 - rho * rho) / if interior { 1.0 + rho * rho } else { 1.0 };
    Ok(var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldPenalties {
    pub lambda_gamma: f64,
    pub lambda_phi: f64,
    /// One level per node-wise regression, indexed by control.
    pub lambda_psi: Vec<f64>,
}

/// Fold-invariant penalties of the simulation design: the reduced-form noise
/// variance is `β0² σ_ν² + σ_ε²` and node-wise levels use the design's
/// conditional standard deviations.
pub fn fold_penalties(
    n_k: usize,
    p: usize,
    rho: f64,
    beta0: f64,
    sigma_nu: f64,
    sigma_eps: f64,
    cfg: &PenaltyConfig,
) -> Result<FoldPenalties, PenaltyError> {
    if n_k < 2 || p < 2 {
        return Err(PenaltyError::InvalidArgument(format!("need n_k >= 2 and p >= 2, got ({n_k}, {p})")));
    }
    if !(sigma_nu > 0.0 && sigma_eps > 0.0) {
        return Err(PenaltyError::InvalidArgument("noise standard deviations must be positive".into()));
    }
    let base = bcch_lambda(n_k, p, cfg)?;
    let base_nodewise = bcch_lambda(n_k, p - 1, cfg)?;
    let sigma_e = (beta0 * beta0 * sigma_nu * sigma_nu + sigma_eps * sigma_eps).sqrt();
    let lambda_psi = (0..p)
        .map(|j| sigma_cond(j, p, rho).map(|s| base_nodewise * s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FoldPenalties { lambda_gamma: base * sigma_nu, lambda_phi: base * sigma_e, lambda_psi })
}

/// Feasible penalty for a regression with unknown noise level.
///
/// A pilot fit at `base · sd(y)` (the raw response spread, conservative)
/// yields residuals whose root-mean-square replaces the unknown noise
/// standard deviation; the returned level is `base · σ̂`. Exactly one
/// refinement is performed. The spread is taken about the mean when an
/// intercept is fitted and about zero otherwise.
pub fn refined_lambda(
    x: &Matrix,
    y: &[f64],
    base: f64,
    include_intercept: bool,
    standardize: bool,
) -> Result<f64, PenaltyError> {
    let n = y.len() as f64;
    let center = if include_intercept { y.iter().sum::<f64>() / n } else { 0.0 };
    let spread = (y.iter().map(|v| (v - center).powi(2)).sum::<f64>() / n).sqrt();
    if !(spread > 0.0) {
        return Err(PenaltyError::InvalidArgument("response has no variation".into()));
    }
    let pilot = LassoProblem::new(x, y, base * spread).intercept(include_intercept).standardize(standardize);
    let fit = fit_lasso(&pilot)?;
    let rss: f64 = (0..x.rows())
        .map(|i| {
            let r = y[i] - fit.intercept - dot(x.row(i), &fit.coefs);
            r * r
        })
        .sum();
    let sigma = (rss / n).sqrt();
    if !(sigma > 0.0) {
        return Err(PenaltyError::InvalidArgument("pilot fit interpolates the response".into()));
    }
    Ok(base * sigma)
}
