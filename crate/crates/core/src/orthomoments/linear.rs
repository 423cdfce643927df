//! Moment functions of the partially linear model, evaluated from the second
//! moments of `W = (X, D, Y)`.
//!
//! Every residual in the model is a linear form `aᵀW`, so each population
//! expectation `E[(aᵀW)(cᵀW)]` is `aᵀMc` with `M = E[WWᵀ]`. Products of
//! expectations stand in for the independent-copy terms.

use std::sync::Arc;

use super::{MomentSystem, OrthoError};
use crate::numkit::{dot, spd_inverse, toeplitz_sigma, Matrix};

/// Second moments of `W = (X, D, Y)`; `X` occupies the first `p` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMoments {
    p: usize,
    m: Matrix,
}

impl LinearMoments {
    pub fn new(m: Matrix) -> Result<Self, OrthoError> {
        if !m.is_square() || m.rows() < 3 {
            return Err(OrthoError::Shape(format!("second-moment matrix must be square of size p + 2, got {}x{}", m.rows(), m.cols())));
        }
        Ok(Self { p: m.rows() - 2, m })
    }

    /// Sample second moments `(1/n) Σ W_i W_iᵀ`.
    pub fn from_sample(x: &Matrix, d: &[f64], y: &[f64]) -> Result<Self, OrthoError> {
        let (n, p) = (x.rows(), x.cols());
        if d.len() != n || y.len() != n || n == 0 {
            return Err(OrthoError::Shape("sample columns have different lengths".into()));
        }
        let mut m = Matrix::zeros(p + 2, p + 2);
        let mut w = vec![0.0; p + 2];
        for i in 0..n {
            w[..p].copy_from_slice(x.row(i));
            w[p] = d[i];
            w[p + 1] = y[i];
            for a in 0..p + 2 {
                for b in 0..p + 2 {
                    m[(a, b)] += w[a] * w[b] / n as f64;
                }
            }
        }
        Self::new(m)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    /// `E[XXᵀ]`.
    pub fn gram(&self) -> Matrix {
        Matrix::from_fn(self.p, self.p, |i, j| self.m[(i, j)])
    }

    fn coef(&self, x_part: impl Fn(usize) -> f64, d: f64, y: f64) -> Vec<f64> {
        let mut a: Vec<f64> = (0..self.p).map(x_part).collect();
        a.push(d);
        a.push(y);
        a
    }

    /// `Y − Xᵀφ − β(D − Xᵀγ)`.
    pub fn outcome_residual(&self, beta: f64, gamma: &[f64], phi: &[f64]) -> Vec<f64> {
        self.coef(|j| beta * gamma[j] - phi[j], -beta, 1.0)
    }

    /// `D − Xᵀγ`.
    pub fn treatment_residual(&self, gamma: &[f64]) -> Vec<f64> {
        self.coef(|j| -gamma[j], 1.0, 0.0)
    }

    /// `Y − Xᵀφ`.
    pub fn reduced_form_residual(&self, phi: &[f64]) -> Vec<f64> {
        self.coef(|j| -phi[j], 0.0, 1.0)
    }

    /// `Y − Dβ − Xᵀθ`.
    pub fn structural_residual(&self, beta: f64, theta: &[f64]) -> Vec<f64> {
        self.coef(|j| -theta[j], -beta, 1.0)
    }

    /// `E[(aᵀW)(cᵀW)]`.
    pub fn cross(&self, a: &[f64], c: &[f64]) -> f64 {
        dot(a, &self.m.matvec(c))
    }

    /// `E[X (aᵀW)]`.
    pub fn with_x(&self, a: &[f64]) -> Vec<f64> {
        let full = self.m.matvec(a);
        full[..self.p].to_vec()
    }

    /// `E[(Y − Xᵀφ − β(D − Xᵀγ))(D − Xᵀγ)]`.
    pub fn psi_dl(&self, beta: f64, gamma: &[f64], phi: &[f64]) -> f64 {
        self.cross(&self.outcome_residual(beta, gamma, phi), &self.treatment_residual(gamma))
    }

    /// `ψ^DL − E[r Xᵀ] Θ E[X(D − Xᵀγ)]`.
    pub fn psi_tl(&self, beta: f64, gamma: &[f64], phi: &[f64], theta: &Matrix) -> f64 {
        let r = self.outcome_residual(beta, gamma, phi);
        let v = self.treatment_residual(gamma);
        let b_r = self.with_x(&r);
        let b_v = self.with_x(&v);
        self.cross(&r, &v) - dot(&b_r, &theta.matvec(&b_v))
    }
}

/// A moment system together with the point that solves it.
#[derive(Debug, Clone)]
pub struct BaseSystem {
    pub name: &'static str,
    pub system: MomentSystem,
    pub beta0: f64,
    pub eta0: Vec<f64>,
}

/// Gaussian design with `X ~ N(0, Σ(ρ))`, `D = Xᵀγ0 + ν`, `Y = Dβ0 + Xᵀθ0 + ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLinearModel {
    pub beta0: f64,
    pub gamma0: Vec<f64>,
    pub theta0: Vec<f64>,
    pub phi0: Vec<f64>,
    pub sigma: Matrix,
    pub precision: Matrix,
    pub moments: LinearMoments,
}

impl GaussianLinearModel {
    pub fn new(
        rho: f64,
        beta0: f64,
        gamma0: Vec<f64>,
        theta0: Vec<f64>,
        sigma_nu: f64,
        sigma_eps: f64,
    ) -> Result<Self, OrthoError> {
        let p = gamma0.len();
        if theta0.len() != p || p == 0 {
            return Err(OrthoError::Shape("γ0 and θ0 must have the same positive length".into()));
        }
        let sigma = toeplitz_sigma(p, rho)?;
        let precision = spd_inverse(&sigma)?;
        let phi0: Vec<f64> = (0..p).map(|j| theta0[j] + beta0 * gamma0[j]).collect();
        let sg = sigma.matvec(&gamma0);
        let sp = sigma.matvec(&phi0);
        let var_d = dot(&gamma0, &sg) + sigma_nu * sigma_nu;
        let cov_dy = dot(&gamma0, &sp) + beta0 * sigma_nu * sigma_nu;
        let var_y = dot(&phi0, &sp) + beta0 * beta0 * sigma_nu * sigma_nu + sigma_eps * sigma_eps;
        let mut m = Matrix::zeros(p + 2, p + 2);
        for i in 0..p {
            for j in 0..p {
                m[(i, j)] = sigma[(i, j)];
            }
            m[(i, p)] = sg[i];
            m[(p, i)] = sg[i];
            m[(i, p + 1)] = sp[i];
            m[(p + 1, i)] = sp[i];
        }
        m[(p, p)] = var_d;
        m[(p, p + 1)] = cov_dy;
        m[(p + 1, p)] = cov_dy;
        m[(p + 1, p + 1)] = var_y;
        Ok(Self { beta0, gamma0, theta0, phi0, sigma, precision, moments: LinearMoments::new(m)? })
    }

    /// Geometric coefficients `0.5^{j−1}` in both equations with unit noise.
    pub fn geometric(p: usize, rho: f64) -> Result<Self, OrthoError> {
        let g: Vec<f64> = (0..p).map(|j| 0.5f64.powi(j as i32)).collect();
        Self::new(rho, 1.0, g.clone(), g, 1.0, 1.0)
    }

    pub fn p(&self) -> usize {
        self.gamma0.len()
    }

    /// `η = θ`: `F = E[(Y − Dβ − Xᵀθ)D]`, `U = E[X(Y − Dβ − Xᵀθ)]`.
    /// Not orthogonal; a first-order lift gives the partialling-out moment.
    pub fn naive_system(&self) -> BaseSystem {
        let mom = Arc::new(self.moments.clone());
        let (mf, mu) = (Arc::clone(&mom), mom);
        let p = self.p();
        let e_d = unit(p + 2, p);
        let system = MomentSystem::new(
            p,
            move |beta, theta| mf.cross(&mf.structural_residual(beta, theta), &e_d),
            move |beta, theta| mu.with_x(&mu.structural_residual(beta, theta)),
        );
        BaseSystem { name: "naive", system, beta0: self.beta0, eta0: self.theta0.clone() }
    }

    /// `η = (γ, φ)`: `F = ψ^DL`, `U = (E[X(D − Xᵀγ)], E[X(Y − Xᵀφ)])`.
    pub fn double_lasso_system(&self) -> BaseSystem {
        let mom = Arc::new(self.moments.clone());
        let (mf, mu) = (Arc::clone(&mom), mom);
        let p = self.p();
        let system = MomentSystem::new(
            2 * p,
            move |beta, eta| mf.psi_dl(beta, &eta[..p], &eta[p..]),
            move |_, eta| {
                let mut u = mu.with_x(&mu.treatment_residual(&eta[..p]));
                u.extend(mu.with_x(&mu.reduced_form_residual(&eta[p..])));
                u
            },
        );
        let mut eta0 = self.gamma0.clone();
        eta0.extend_from_slice(&self.phi0);
        BaseSystem { name: "double", system, beta0: self.beta0, eta0 }
    }

    /// `η = (γ, φ, vec Θ)` with `Θ` row-major: `F = ψ^TL`,
    /// `U = (E[X(D − Xᵀγ)], E[X(Y − Xᵀφ)], vec(ΘΣ − I))`.
    pub fn triple_lasso_system(&self) -> BaseSystem {
        let mom = Arc::new(self.moments.clone());
        let (mf, mu) = (Arc::clone(&mom), mom);
        let p = self.p();
        let sigma = self.sigma.clone();
        let system = MomentSystem::new(
            2 * p + p * p,
            move |beta, eta| {
                let theta = Matrix::new(p, p, eta[2 * p..].to_vec()).expect("finite nuisance");
                mf.psi_tl(beta, &eta[..p], &eta[p..2 * p], &theta)
            },
            move |_, eta| {
                let mut u = mu.with_x(&mu.treatment_residual(&eta[..p]));
                u.extend(mu.with_x(&mu.reduced_form_residual(&eta[p..2 * p])));
                let theta = Matrix::new(p, p, eta[2 * p..].to_vec()).expect("finite nuisance");
                let prod = theta.matmul(&sigma).sub(&Matrix::identity(p));
                u.extend_from_slice(prod.as_slice());
                u
            },
        );
        let mut eta0 = self.gamma0.clone();
        eta0.extend_from_slice(&self.phi0);
        eta0.extend_from_slice(self.precision.as_slice());
        BaseSystem { name: "triple", system, beta0: self.beta0, eta0 }
    }

    /// The base system whose order-`k` lift is checked by the CLI:
    /// naive for `k = 1`, double Lasso for `k = 2`, triple Lasso for `k = 3`.
    pub fn system_for_order(&self, k: usize) -> Option<BaseSystem> {
        match k {
            1 => Some(self.naive_system()),
            2 => Some(self.double_lasso_system()),
            3 => Some(self.triple_lasso_system()),
            _ => None,
        }
    }
}

fn unit(len: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[i] = 1.0;
    v
}
