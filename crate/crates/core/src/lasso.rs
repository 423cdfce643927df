//! Cyclic coordinate-descent Lasso.
//!
//! Minimizes the half-squared-loss objective
//!
//! ```text
//! (1/(2n)) Σ_i (y_i − a − x_iᵀb)² + λ ‖b̃‖₁
//! ```
//!
//! where `b̃` are the coefficients on the working scale: columns are centered
//! when an intercept is fitted and divided by their root-mean-square deviation
//! (1/n normalization) when `standardize` is on. Coefficients are reported on
//! the original scale. Sweeps run in ascending coordinate order with no
//! randomization, so fits are a deterministic function of the inputs.

use thiserror::Error;

use crate::numkit::{dot, Matrix};

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LassoError {
    #[error("invalid lasso problem: {0}")]
    InvalidProblem(String),
    #[error("column {column} has zero variance and cannot be standardized")]
    ZeroVariance { column: usize },
    #[error("coordinate descent did not converge after {} sweeps", .fit.iterations)]
    NotConverged { fit: Box<LassoFit> },
}

#[derive(Debug, Clone, Copy)]
pub struct LassoProblem<'a> {
    pub x: &'a Matrix,
    pub y: &'a [f64],
    pub lambda: f64,
    pub include_intercept: bool,
    pub standardize: bool,
    pub tol: f64,
    pub max_iter: usize,
    /// Starting coefficients on the original scale.
    pub warm_start: Option<&'a [f64]>,
}

impl<'a> LassoProblem<'a> {
    /// Intercept and standardization on, default tolerance and sweep budget.
    pub fn new(x: &'a Matrix, y: &'a [f64], lambda: f64) -> Self {
        Self {
            x,
            y,
            lambda,
            include_intercept: true,
            standardize: true,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            warm_start: None,
        }
    }

    pub fn intercept(mut self, on: bool) -> Self {
        self.include_intercept = on;
        self
    }

    pub fn standardize(mut self, on: bool) -> Self {
        self.standardize = on;
        self
    }

    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn warm_start(mut self, coefs: &'a [f64]) -> Self {
        self.warm_start = Some(coefs);
        self
    }

    fn validate(&self) -> Result<(), LassoError> {
        let bad = |m: String| Err(LassoError::InvalidProblem(m));
        if self.x.rows() == 0 {
            return bad("no observations".into());
        }
        if self.y.len() != self.x.rows() {
            return bad(format!("y has {} entries, X has {} rows", self.y.len(), self.x.rows()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite nonnegative number, got {}", self.lambda));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return bad("non-finite response".into());
        }
        if let Some(w) = self.warm_start {
            if w.len() != self.x.cols() {
                return bad(format!("warm start has {} entries, expected {}", w.len(), self.x.cols()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub intercept: f64,
    pub coefs: Vec<f64>,
    pub support: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

impl LassoFit {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + dot(row, &self.coefs)
    }
}

pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Per-column centering and scaling that defines the working scale.
struct Scaling {
    center: Vec<f64>,
    scale: Vec<f64>,
    y_center: f64,
}

impl Scaling {
    fn compute(problem: &LassoProblem<'_>) -> Result<Self, LassoError> {
        let x = problem.x;
        let (n, p) = (x.rows(), x.cols());
        let inv_n = 1.0 / n as f64;
        let mut center = vec![0.0; p];
        let mut y_center = 0.0;
        if problem.include_intercept {
            for i in 0..n {
                for (c, v) in center.iter_mut().zip(x.row(i)) {
                    *c += v;
                }
            }
            center.iter_mut().for_each(|c| *c *= inv_n);
            y_center = problem.y.iter().sum::<f64>() * inv_n;
        }
        let mut scale = vec![1.0; p];
        if problem.standardize {
            let mut dev2 = vec![0.0; p];
            let mut raw2 = vec![0.0; p];
            for i in 0..n {
                for (j, v) in x.row(i).iter().enumerate() {
                    let d = v - center[j];
                    dev2[j] += d * d;
                    raw2[j] += v * v;
                }
            }
            for j in 0..p {
                let s = (dev2[j] * inv_n).sqrt();
                let rms = (raw2[j] * inv_n).sqrt();
                if !(s > 1e-10 * rms) || s == 0.0 {
                    return Err(LassoError::ZeroVariance { column: j });
                }
                scale[j] = s;
            }
        }
        Ok(Self { center, scale, y_center })
    }
}

/// Largest working-scale gradient magnitude at b = 0; any λ at or above it
/// gives the all-zero fit.
pub fn lambda_max(problem: &LassoProblem<'_>) -> Result<f64, LassoError> {
    problem.validate()?;
    let sc = Scaling::compute(problem)?;
    let yc: Vec<f64> = problem.y.iter().map(|v| v - sc.y_center).collect();
    let grad = working_gradient(problem.x, &yc, &sc);
    Ok(grad.iter().fold(0.0, |m, g| m.max(g.abs())))
}

/// `(1/n) w_jᵀ r` for every working column `w_j`.
fn working_gradient(x: &Matrix, r: &[f64], sc: &Scaling) -> Vec<f64> {
    let n = x.rows();
    let mut g = vec![0.0; x.cols()];
    for (i, &ri) in r.iter().enumerate() {
        for (j, v) in x.row(i).iter().enumerate() {
            g[j] += (v - sc.center[j]) * ri;
        }
    }
    for (gj, s) in g.iter_mut().zip(&sc.scale) {
        *gj /= n as f64 * s;
    }
    g
}

fn kkt_violation(grad: &[f64], coefs_working: &[f64], lambda: f64) -> f64 {
    grad.iter()
        .zip(coefs_working)
        .map(|(&g, &b)| {
            if b != 0.0 {
                (g - lambda * b.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

pub fn fit_lasso(problem: &LassoProblem<'_>) -> Result<LassoFit, LassoError> {
    solve(problem, None)
}

/// Like [`fit_lasso`], also returning the objective after every full sweep.
pub fn fit_lasso_traced(problem: &LassoProblem<'_>) -> Result<(LassoFit, Vec<f64>), LassoError> {
    let mut trace = Vec::new();
    let fit = solve(problem, Some(&mut trace))?;
    Ok((fit, trace))
}

fn solve(problem: &LassoProblem<'_>, mut trace: Option<&mut Vec<f64>>) -> Result<LassoFit, LassoError> {
    problem.validate()?;
    let x = problem.x;
    let (n, p) = (x.rows(), x.cols());
    let inv_n = 1.0 / n as f64;
    let lambda = problem.lambda;
    let sc = Scaling::compute(problem)?;

    // column-major working copy
    let mut cols = vec![vec![0.0; n]; p];
    for i in 0..n {
        for (j, v) in x.row(i).iter().enumerate() {
            cols[j][i] = (v - sc.center[j]) / sc.scale[j];
        }
    }
    let col_sq: Vec<f64> = cols.iter().map(|c| dot(c, c) * inv_n).collect();

    let mut b: Vec<f64> = match problem.warm_start {
        Some(w) => w.iter().zip(&sc.scale).map(|(v, s)| v * s).collect(),
        None => vec![0.0; p],
    };
    let mut r: Vec<f64> = problem.y.iter().map(|v| v - sc.y_center).collect();
    for (j, &bj) in b.iter().enumerate() {
        if bj != 0.0 {
            for (ri, w) in r.iter_mut().zip(&cols[j]) {
                *ri -= bj * w;
            }
        }
    }

    let objective = |r: &[f64], b: &[f64]| {
        0.5 * inv_n * dot(r, r) + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
    };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < problem.max_iter {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                // an all-zero column can only carry a zero coefficient
                continue;
            }
            let col = &cols[j];
            let old = b[j];
            let z = dot(col, &r) * inv_n + col_sq[j] * old;
            let new = soft_threshold(z, lambda) / col_sq[j];
            if new != old {
                let delta = new - old;
                for (ri, w) in r.iter_mut().zip(col) {
                    *ri -= delta * w;
                }
                b[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(objective(&r, &b));
        }
        if max_change <= problem.tol {
            let grad: Vec<f64> = cols.iter().map(|c| dot(c, &r) * inv_n).collect();
            if kkt_violation(&grad, &b, lambda) <= 10.0 * problem.tol {
                converged = true;
                break;
            }
        }
    }

    let coefs: Vec<f64> = b.iter().zip(&sc.scale).map(|(v, s)| v / s).collect();
    let intercept = if problem.include_intercept {
        sc.y_center - dot(&sc.center, &coefs)
    } else {
        0.0
    };
    let support = coefs.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| j).collect();
    let fit = LassoFit { intercept, coefs, support, iterations, converged, objective: objective(&r, &b) };
    if converged {
        Ok(fit)
    } else {
        Err(LassoError::NotConverged { fit: Box::new(fit) })
    }
}

/// Maximum violation of the subgradient optimality conditions on the working scale.
pub fn kkt_residual(fit: &LassoFit, problem: &LassoProblem<'_>) -> Result<f64, LassoError> {
    problem.validate()?;
    let sc = Scaling::compute(problem)?;
    let x = problem.x;
    let r: Vec<f64> = (0..x.rows()).map(|i| problem.y[i] - fit.predict_row(x.row(i))).collect();
    let grad = working_gradient(x, &r, &sc);
    let b: Vec<f64> = fit.coefs.iter().zip(&sc.scale).map(|(v, s)| v * s).collect();
    Ok(kkt_violation(&grad, &b, problem.lambda))
}
