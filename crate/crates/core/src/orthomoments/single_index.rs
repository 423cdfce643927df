//! Second-order orthogonal moment for M-estimation with a single index.
//!
//! The target minimizes `E[m(Dβ + Xᵀθ, Y)]`. With `μ` solving
//! `E[m''(D − Xᵀμ)X] = 0`, the first-order orthogonal pair is
//! `F = E[m'(D − Xᵀμ)]` and `U = (E[m'X], E[m''(D − Xᵀμ)X])` in
//! `η = (θ, μ)`, and its second-order lift has the closed form
//!
//! ```text
//! F̃ = E[m'(D − Xᵀμ)] − E[m'X]ᵀ G⁻¹ E[m''(D − Xᵀμ)X] + ½ E[m'X]ᵀ G⁻¹ H G⁻¹ E[m'X]
//! ```
//!
//! with `G = E[m''XXᵀ]` and `H = E[m'''(D − Xᵀμ)XXᵀ]`.

use std::sync::Arc;

use super::linear::LinearMoments;
use super::{MomentSystem, OrthoError};
use crate::numkit::{dot, Lu, Matrix};

/// Derivatives of the loss `m(t, y)` in its first argument.
pub trait SingleIndexLoss: Send + Sync {
    fn d1(&self, t: f64, y: f64) -> f64;
    fn d2(&self, t: f64, y: f64) -> f64;
    fn d3(&self, t: f64, y: f64) -> f64;
}

/// `m(t, y) = (y − t)²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredLoss;

impl SingleIndexLoss for SquaredLoss {
    fn d1(&self, t: f64, y: f64) -> f64 {
        -2.0 * (y - t)
    }
    fn d2(&self, _t: f64, _y: f64) -> f64 {
        2.0
    }
    fn d3(&self, _t: f64, _y: f64) -> f64 {
        0.0
    }
}

/// Logistic negative log-likelihood `m(t, y) = log(1 + eᵗ) − y·t`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogisticLoss;

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl SingleIndexLoss for LogisticLoss {
    fn d1(&self, t: f64, y: f64) -> f64 {
        sigmoid(t) - y
    }
    fn d2(&self, t: f64, _y: f64) -> f64 {
        let s = sigmoid(t);
        s * (1.0 - s)
    }
    fn d3(&self, t: f64, _y: f64) -> f64 {
        let s = sigmoid(t);
        s * (1.0 - s) * (1.0 - 2.0 * s)
    }
}

/// `E[m'(D − Xᵀμ)]`, `E[m'X]` and `E[m''(D − Xᵀμ)X]` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMoments {
    pub f: f64,
    pub u_theta: Vec<f64>,
    pub u_mu: Vec<f64>,
}

/// Source of the expectations entering the single-index moments.
pub trait MomentEvaluator: Send + Sync {
    fn p(&self) -> usize;
    fn moments(&self, beta: f64, theta: &[f64], mu: &[f64]) -> IndexMoments;
    /// `(G, H)` at the given point.
    fn curvature(&self, beta: f64, theta: &[f64], mu: &[f64]) -> (Matrix, Matrix);
}

/// Sample averages over observed `(X, D, Y)` for an arbitrary smooth loss.
#[derive(Debug, Clone)]
pub struct EmpiricalMoments<L> {
    pub x: Matrix,
    pub d: Vec<f64>,
    pub y: Vec<f64>,
    pub loss: L,
}

impl<L: SingleIndexLoss> EmpiricalMoments<L> {
    fn point(&self, i: usize, beta: f64, theta: &[f64], mu: &[f64]) -> (f64, f64) {
        let xi = self.x.row(i);
        (self.d[i] * beta + dot(xi, theta), self.d[i] - dot(xi, mu))
    }
}

impl<L: SingleIndexLoss> MomentEvaluator for EmpiricalMoments<L> {
    fn p(&self) -> usize {
        self.x.cols()
    }

    fn moments(&self, beta: f64, theta: &[f64], mu: &[f64]) -> IndexMoments {
        let (n, p) = (self.x.rows(), self.x.cols());
        let mut f = 0.0;
        let mut u_theta = vec![0.0; p];
        let mut u_mu = vec![0.0; p];
        for i in 0..n {
            let (t, v) = self.point(i, beta, theta, mu);
            let (m1, m2) = (self.loss.d1(t, self.y[i]), self.loss.d2(t, self.y[i]));
            f += m1 * v;
            for (j, xij) in self.x.row(i).iter().enumerate() {
                u_theta[j] += m1 * xij;
                u_mu[j] += m2 * v * xij;
            }
        }
        let nf = n as f64;
        u_theta.iter_mut().chain(u_mu.iter_mut()).for_each(|a| *a /= nf);
        IndexMoments { f: f / nf, u_theta, u_mu }
    }

    fn curvature(&self, beta: f64, theta: &[f64], mu: &[f64]) -> (Matrix, Matrix) {
        let (n, p) = (self.x.rows(), self.x.cols());
        let mut g = Matrix::zeros(p, p);
        let mut h = Matrix::zeros(p, p);
        for i in 0..n {
            let (t, v) = self.point(i, beta, theta, mu);
            let (m2, m3) = (self.loss.d2(t, self.y[i]), self.loss.d3(t, self.y[i]));
            let xi = self.x.row(i);
            for a in 0..p {
                for b in 0..p {
                    g[(a, b)] += m2 * xi[a] * xi[b];
                    h[(a, b)] += m3 * v * xi[a] * xi[b];
                }
            }
        }
        (g.scale(1.0 / n as f64), h.scale(1.0 / n as f64))
    }
}

/// Squared-loss expectations in closed form from second moments of
/// `(X, D, Y)`, either population or sample.
#[derive(Debug, Clone)]
pub struct SquaredLossMoments(pub LinearMoments);

impl MomentEvaluator for SquaredLossMoments {
    fn p(&self) -> usize {
        self.0.p()
    }

    fn moments(&self, beta: f64, theta: &[f64], mu: &[f64]) -> IndexMoments {
        let r = self.0.structural_residual(beta, theta);
        let v = self.0.treatment_residual(mu);
        IndexMoments {
            f: -2.0 * self.0.cross(&r, &v),
            u_theta: self.0.with_x(&r).iter().map(|a| -2.0 * a).collect(),
            u_mu: self.0.with_x(&v).iter().map(|a| 2.0 * a).collect(),
        }
    }

    fn curvature(&self, _beta: f64, _theta: &[f64], _mu: &[f64]) -> (Matrix, Matrix) {
        let p = self.0.p();
        (self.0.gram().scale(2.0), Matrix::zeros(p, p))
    }
}

/// The closed-form second-order moment at `η̃ = (θ, μ, G, H)`. `G⁻¹` only
/// enters through linear solves.
pub fn single_index_ftilde(
    moments: &dyn MomentEvaluator,
    beta: f64,
    theta: &[f64],
    mu: &[f64],
    g: &Matrix,
    h: &Matrix,
) -> Result<f64, OrthoError> {
    let p = moments.p();
    if theta.len() != p || mu.len() != p || g.rows() != p || !g.is_square() || h.rows() != p || !h.is_square() {
        return Err(OrthoError::Shape(format!("single-index inputs must all have dimension {p}")));
    }
    let lu = Lu::factor(g).map_err(|_| OrthoError::Singular { condition: f64::INFINITY })?;
    let m = moments.moments(beta, theta, mu);
    let s = lu.solve(&m.u_theta);
    let s_t = lu.solve_transpose(&m.u_theta);
    Ok(m.f - dot(&s_t, &m.u_mu) + 0.5 * dot(&s_t, &h.matvec(&s)))
}

/// `(F, U)` in `η = (θ, μ)` for the generic lift.
pub fn single_index_system(moments: Arc<dyn MomentEvaluator>) -> MomentSystem {
    let p = moments.p();
    let (mf, mu) = (Arc::clone(&moments), moments);
    MomentSystem::new(
        2 * p,
        move |beta, eta| mf.moments(beta, &eta[..p], &eta[p..]).f,
        move |beta, eta| {
            let m = mu.moments(beta, &eta[..p], &eta[p..]);
            let mut u = m.u_theta;
            u.extend(m.u_mu);
            u
        },
    )
}

/// `B0 = [[−G⁻¹HG⁻¹, G⁻¹], [G⁻¹, 0]]`.
pub fn single_index_b0(g: &Matrix, h: &Matrix) -> Result<Matrix, OrthoError> {
    let p = g.rows();
    let lu = Lu::factor(g).map_err(|_| OrthoError::Singular { condition: f64::INFINITY })?;
    let g_inv = lu.inverse();
    let corner = g_inv.matmul(h).matmul(&g_inv).scale(-1.0);
    Ok(Matrix::from_fn(2 * p, 2 * p, |i, j| match (i < p, j < p) {
        (true, true) => corner[(i, j)],
        (true, false) => g_inv[(i, j - p)],
        (false, true) => g_inv[(i - p, j)],
        (false, false) => 0.0,
    }))
}
