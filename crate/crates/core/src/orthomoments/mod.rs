//! Recursive construction of higher-order Neyman-orthogonal moment functions.
//!
//! A [`MomentSystem`] is a pair `F(β, η)` (scalar) and `U(β, η)` (one
//! equation per nuisance coordinate) solved by `(β0, η0)`. If `F` is already
//! orthogonal to order `k − 1`, [`lift`] returns a system whose scalar moment
//!
//! ```text
//! F̃(β, η̃) = F(β, η) − (1/k!) · B[U(β, η)^{⊗k}],   B0 = (A0⁻¹)^{⊗k} ∇ᵏF(β0, η0)
//! ```
//!
//! is orthogonal to order `k` in the enlarged nuisance `η̃ = (η, vec A, vec B)`,
//! where `A0 = ∂U(β0, η0)ᵀ/∂η`. Derivatives come from the system when it
//! supplies them and from central finite differences otherwise.

pub mod linear;
pub mod single_index;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::numkit::{Lu, Matrix, NumError};

/// Largest number of tensor entries that will be allocated.
pub const TENSOR_BUDGET: usize = 100_000_000;

/// Condition number above which `A0` is treated as singular.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrthoError {
    #[error("tensor of order {order} and dimension {dim} exceeds the budget of {TENSOR_BUDGET} entries")]
    TensorBudget { order: usize, dim: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix is singular or ill-conditioned (condition number {condition:e})")]
    Singular { condition: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

fn tensor_len(order: usize, dim: usize) -> Result<usize, OrthoError> {
    u32::try_from(order)
        .ok()
        .and_then(|o| dim.checked_pow(o))
        .filter(|&len| len <= TENSOR_BUDGET)
        .ok_or(OrthoError::TensorBudget { order, dim })
}

/// Dense order-`m` tensor over `R^q`, stored in lexicographic index order
/// (last index fastest).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    order: usize,
    dim: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(order={}, dim={}, max|.|={:e})", self.order, self.dim, self.max_abs())
    }
}

impl Tensor {
    pub fn zeros(order: usize, dim: usize) -> Result<Self, OrthoError> {
        Ok(Self { order, dim, data: vec![0.0; tensor_len(order, dim)?] })
    }

    pub fn from_vec(order: usize, dim: usize, data: Vec<f64>) -> Result<Self, OrthoError> {
        let len = tensor_len(order, dim)?;
        if data.len() != len {
            return Err(OrthoError::Shape(format!("expected {len} entries, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(OrthoError::InvalidArgument("non-finite tensor entry".into()));
        }
        Ok(Self { order, dim, data })
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self, OrthoError> {
        if !m.is_square() {
            return Err(OrthoError::Shape(format!("{}x{} matrix is not square", m.rows(), m.cols())));
        }
        Self::from_vec(2, m.rows(), m.as_slice().to_vec())
    }

    /// Order-2 tensors as a matrix.
    pub fn to_matrix(&self) -> Option<Matrix> {
        (self.order == 2).then(|| Matrix::from_fn(self.dim, self.dim, |i, j| self.data[i * self.dim + j]))
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.order, "index has wrong order");
        idx.iter().fold(0, |acc, &i| {
            assert!(i < self.dim, "index out of range");
            acc * self.dim + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor { order: self.order, dim: self.dim, data: self.data.iter().map(|v| c * v).collect() }
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<(), OrthoError> {
        if self.order != other.order || self.dim != other.dim {
            return Err(OrthoError::Shape(format!(
                "order {} dim {} vs order {} dim {}",
                self.order, self.dim, other.order, other.dim
            )));
        }
        Ok(())
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Tensor, b: f64) -> Result<Tensor, OrthoError> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(Tensor { order: self.order, dim: self.dim, data })
    }

    /// `self[v^{⊗m}]`, evaluated by contracting one mode at a time.
    pub fn multilinear(&self, v: &[f64]) -> f64 {
        assert_eq!(v.len(), self.dim, "vector length must equal tensor dimension");
        let mut cur = self.data.clone();
        for _ in 0..self.order {
            cur = cur.chunks(self.dim).map(|c| c.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
        }
        cur[0]
    }

    /// Applies `f` to every fiber along every mode in turn.
    fn map_fibers(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
        let q = self.dim;
        let mut data = self.data.clone();
        let mut fiber = vec![0.0; q];
        for mode in 0..self.order {
            let stride = q.pow((self.order - 1 - mode) as u32);
            let outer = data.len() / (stride * q);
            for o in 0..outer {
                for inner in 0..stride {
                    let base = o * stride * q + inner;
                    for (i, slot) in fiber.iter_mut().enumerate() {
                        *slot = data[base + i * stride];
                    }
                    for (i, v) in f(&fiber).into_iter().enumerate() {
                        data[base + i * stride] = v;
                    }
                }
            }
        }
        Tensor { order: self.order, dim: q, data }
    }

    /// Symmetrization by averaging over all index permutations.
    pub fn symmetrize(&self) -> Tensor {
        let mut groups: HashMap<Vec<usize>, (f64, usize)> = HashMap::new();
        let indices: Vec<Vec<usize>> = (0..self.data.len()).map(|flat| self.unflatten(flat)).collect();
        for (flat, idx) in indices.iter().enumerate() {
            let mut key = idx.clone();
            key.sort_unstable();
            let e = groups.entry(key).or_insert((0.0, 0));
            e.0 += self.data[flat];
            e.1 += 1;
        }
        let data = indices
            .iter()
            .map(|idx| {
                let mut key = idx.clone();
                key.sort_unstable();
                let (s, c) = groups[&key];
                s / c as f64
            })
            .collect();
        Tensor { order: self.order, dim: self.dim, data }
    }

    fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.order];
        for slot in idx.iter_mut().rev() {
            *slot = flat % self.dim;
            flat /= self.dim;
        }
        idx
    }
}

/// `a^{⊗m}`.
pub fn outer_power(a: &[f64], m: usize) -> Result<Tensor, OrthoError> {
    let q = a.len();
    tensor_len(m, q)?;
    let mut data = vec![1.0];
    for _ in 0..m {
        data = data.iter().flat_map(|&d| a.iter().map(move |&x| d * x)).collect();
    }
    Ok(Tensor { order: m, dim: q, data })
}

/// `C^{⊗m} D`: multiplies `C` into every mode of `D`.
pub fn mode_product(c: &Matrix, d: &Tensor) -> Result<Tensor, OrthoError> {
    if c.rows() != d.dim || c.cols() != d.dim {
        return Err(OrthoError::Shape(format!("{}x{} matrix against dimension {}", c.rows(), c.cols(), d.dim)));
    }
    Ok(d.map_fibers(|fiber| c.matvec(fiber)))
}

/// `(A⁻¹)^{⊗m} D` by one linear solve per fiber.
pub fn mode_solve(lu: &Lu, d: &Tensor) -> Result<Tensor, OrthoError> {
    if lu.dim() != d.dim {
        return Err(OrthoError::Shape(format!("factor of dimension {} against dimension {}", lu.dim(), d.dim)));
    }
    Ok(d.map_fibers(|fiber| lu.solve(fiber)))
}

/// `D[E] = Σ D_{j…} E_{j…}`.
pub fn contract(d: &Tensor, e: &Tensor) -> Result<f64, OrthoError> {
    d.check_same_shape(e)?;
    Ok(d.data.iter().zip(&e.data).map(|(a, b)| a * b).sum())
}

pub type ScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
/// Jacobian of `U` with entry `(i, j) = ∂U_i/∂η_j`.
pub type JacobianFn = Arc<dyn Fn(f64, &[f64]) -> Matrix + Send + Sync>;
/// `(β, η, m) ↦ ∇ᵐ_η F(β, η)`.
pub type DerivativeFn = Arc<dyn Fn(f64, &[f64], usize) -> Tensor + Send + Sync>;

#[derive(Clone)]
pub struct ExactDerivatives {
    pub jacobian: JacobianFn,
    pub f_derivative: DerivativeFn,
}

#[derive(Clone)]
pub struct MomentSystem {
    dim_eta: usize,
    f: ScalarFn,
    u: VectorFn,
    exact: Option<ExactDerivatives>,
}

impl fmt::Debug for MomentSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MomentSystem")
            .field("dim_eta", &self.dim_eta)
            .field("exact_derivatives", &self.exact.is_some())
            .finish()
    }
}

impl MomentSystem {
    pub fn new(
        dim_eta: usize,
        f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        u: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { dim_eta, f: Arc::new(f), u: Arc::new(u), exact: None }
    }

    pub fn with_exact_derivatives(mut self, exact: ExactDerivatives) -> Self {
        self.exact = Some(exact);
        self
    }

    pub fn dim_eta(&self) -> usize {
        self.dim_eta
    }

    pub fn f(&self, beta: f64, eta: &[f64]) -> f64 {
        assert_eq!(eta.len(), self.dim_eta, "nuisance has wrong length");
        (self.f)(beta, eta)
    }

    pub fn u(&self, beta: f64, eta: &[f64]) -> Vec<f64> {
        assert_eq!(eta.len(), self.dim_eta, "nuisance has wrong length");
        let out = (self.u)(beta, eta);
        assert_eq!(out.len(), self.dim_eta, "U must return one entry per nuisance coordinate");
        out
    }

    pub fn scalar_fn(&self) -> ScalarFn {
        Arc::clone(&self.f)
    }

    /// Jacobian of `U`, exact when supplied.
    pub fn jacobian(&self, beta: f64, eta: &[f64], h: f64) -> Matrix {
        match &self.exact {
            Some(ex) => (ex.jacobian)(beta, eta),
            None => numeric_jacobian(self, beta, eta, h),
        }
    }

    /// `∇ᵐ_η F`, exact when supplied.
    pub fn f_derivative(&self, beta: f64, eta: &[f64], order: usize, h: f64) -> Result<Tensor, OrthoError> {
        match &self.exact {
            Some(ex) => Ok((ex.f_derivative)(beta, eta, order)),
            None => numeric_f_derivative(&self.f, beta, eta, order, h),
        }
    }
}

/// Default finite-difference step for derivatives of the given order.
pub fn default_step(order: usize) -> f64 {
    match order {
        0..=2 => 1e-4,
        3 => 5e-3,
        _ => 1e-2,
    }
}

pub fn numeric_jacobian(system: &MomentSystem, beta: f64, eta: &[f64], h: f64) -> Matrix {
    let q = system.dim_eta;
    let mut jac = Matrix::zeros(q, q);
    let mut point = eta.to_vec();
    for j in 0..q {
        point[j] = eta[j] + h;
        let up = system.u(beta, &point);
        point[j] = eta[j] - h;
        let down = system.u(beta, &point);
        point[j] = eta[j];
        for i in 0..q {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    jac
}

/// Central finite-difference `∇ᵐF`: each distinct index multiset is
/// computed once as `δ_{i1}⋯δ_{im}F / (2h)^m` and copied to every
/// permutation, so the result is symmetric by construction.
pub fn numeric_f_derivative(f: &ScalarFn, beta: f64, eta: &[f64], order: usize, h: f64) -> Result<Tensor, OrthoError> {
    let q = eta.len();
    if !(h > 0.0) {
        return Err(OrthoError::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut tensor = Tensor::zeros(order, q)?;
    if order == 0 {
        tensor.data[0] = f(beta, eta);
        return Ok(tensor);
    }
    let mut tuples = Vec::new();
    sorted_tuples(q, order, 0, &mut Vec::with_capacity(order), &mut tuples);
    let denom = (2.0 * h).powi(order as i32);
    let values: Vec<f64> = tuples
        .par_iter()
        .map(|tuple| {
            let mut point = eta.to_vec();
            let mut acc = 0.0;
            for mask in 0u32..(1 << order) {
                point.copy_from_slice(eta);
                let mut sign = 1.0;
                for (t, &i) in tuple.iter().enumerate() {
                    if mask & (1 << t) != 0 {
                        point[i] -= h;
                        sign = -sign;
                    } else {
                        point[i] += h;
                    }
                }
                acc += sign * f(beta, &point);
            }
            acc / denom
        })
        .collect();
    let lookup: HashMap<&[usize], f64> = tuples.iter().map(Vec::as_slice).zip(values).collect();
    for flat in 0..tensor.data.len() {
        let mut key = tensor.unflatten(flat);
        key.sort_unstable();
        tensor.data[flat] = lookup[key.as_slice()];
    }
    Ok(tensor)
}

fn sorted_tuples(q: usize, remaining: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if remaining == 0 {
        out.push(cur.clone());
        return;
    }
    for i in start..q {
        cur.push(i);
        sorted_tuples(q, remaining - 1, i, cur, out);
        cur.pop();
    }
}

/// Finite-difference Jacobian of `U` and `∇^order F` at `(β0, η0)`.
pub fn numeric_derivatives(
    system: &MomentSystem,
    beta0: f64,
    eta0: &[f64],
    order: usize,
    h: f64,
) -> Result<(Matrix, Tensor), OrthoError> {
    if order == 0 {
        return Err(OrthoError::InvalidArgument("derivative order must be at least 1".into()));
    }
    let jac = numeric_jacobian(system, beta0, eta0, h.min(default_step(1)));
    Ok((jac, numeric_f_derivative(&system.f, beta0, eta0, order, h)?))
}

#[derive(Debug, Clone)]
pub struct LiftedSystem {
    base: MomentSystem,
    k: usize,
    beta0: f64,
    eta0: Vec<f64>,
    a0: Matrix,
    b0: Tensor,
    condition: f64,
    step: f64,
}

/// Lifts `system` to order `k` at `(β0, η0)` with the default step.
pub fn lift(system: &MomentSystem, beta0: f64, eta0: &[f64], k: usize) -> Result<LiftedSystem, OrthoError> {
    lift_with_step(system, beta0, eta0, k, default_step(k))
}

pub fn lift_with_step(
    system: &MomentSystem,
    beta0: f64,
    eta0: &[f64],
    k: usize,
    h: f64,
) -> Result<LiftedSystem, OrthoError> {
    let q = system.dim_eta;
    if k == 0 {
        return Err(OrthoError::InvalidArgument("lift order must be at least 1".into()));
    }
    if eta0.len() != q {
        return Err(OrthoError::Shape(format!("eta0 has {} entries, system has {q}", eta0.len())));
    }
    tensor_len(k, q)?;
    let a0 = system.jacobian(beta0, eta0, h.min(default_step(1))).transpose();
    let lu = Lu::factor(&a0).map_err(|_| OrthoError::Singular { condition: f64::INFINITY })?;
    let condition = lu.condition_number();
    if !(condition < MAX_CONDITION) {
        return Err(OrthoError::Singular { condition });
    }
    let grad = system.f_derivative(beta0, eta0, k, h)?;
    let b0 = mode_solve(&lu, &grad)?;
    Ok(LiftedSystem { base: system.clone(), k, beta0, eta0: eta0.to_vec(), a0, b0, condition, step: h })
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

impl LiftedSystem {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Target value at which the lift was built.
    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn base(&self) -> &MomentSystem {
        &self.base
    }

    pub fn a0(&self) -> &Matrix {
        &self.a0
    }

    pub fn b0(&self) -> &Tensor {
        &self.b0
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    pub fn dim_eta_tilde(&self) -> usize {
        let q = self.base.dim_eta;
        q + q * q + self.b0.data.len()
    }

    /// `(η0, vec A0, vec B0)` with `A0` row-major and `B0` lexicographic.
    pub fn eta_tilde0(&self) -> Vec<f64> {
        let mut out = self.eta0.clone();
        out.extend_from_slice(self.a0.as_slice());
        out.extend_from_slice(&self.b0.data);
        out
    }

    fn split<'a>(&self, eta_tilde: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        assert_eq!(eta_tilde.len(), self.dim_eta_tilde(), "lifted nuisance has wrong length");
        let q = self.base.dim_eta;
        let (eta, rest) = eta_tilde.split_at(q);
        let (a, b) = rest.split_at(q * q);
        (eta, a, b)
    }

    pub fn f_tilde(&self, beta: f64, eta_tilde: &[f64]) -> f64 {
        let (eta, _, b) = self.split(eta_tilde);
        let b = Tensor { order: self.k, dim: self.base.dim_eta, data: b.to_vec() };
        self.base.f(beta, eta) - b.multilinear(&self.base.u(beta, eta)) / factorial(self.k)
    }

    /// `(U; vec(∂Uᵀ/∂η − A); vec(A^{⊗k}B − ∇ᵏF))`.
    pub fn u_tilde(&self, beta: f64, eta_tilde: &[f64]) -> Result<Vec<f64>, OrthoError> {
        let (eta, a, b) = self.split(eta_tilde);
        let q = self.base.dim_eta;
        let a = Matrix::new(q, q, a.to_vec())?;
        let b = Tensor::from_vec(self.k, q, b.to_vec())?;
        let mut out = self.base.u(beta, eta);
        let jt = self.base.jacobian(beta, eta, self.step.min(default_step(1))).transpose();
        out.extend(jt.as_slice().iter().zip(a.as_slice()).map(|(x, y)| x - y));
        let ab = mode_product(&a, &b)?;
        let grad = self.base.f_derivative(beta, eta, self.k, self.step)?;
        out.extend(ab.data.iter().zip(&grad.data).map(|(x, y)| x - y));
        Ok(out)
    }

    /// The lifted pair as a moment system in `η̃`, so it can be lifted again.
    pub fn to_system(&self) -> MomentSystem {
        let for_f = self.clone();
        let for_u = self.clone();
        MomentSystem::new(
            self.dim_eta_tilde(),
            move |beta, et| for_f.f_tilde(beta, et),
            move |beta, et| for_u.u_tilde(beta, et).expect("shapes were validated when lifting"),
        )
    }
}

/// Largest absolute `m`-th directional derivative per order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoReport {
    /// Entry `m − 1` holds the maximum for order `m`.
    pub max_by_order: Vec<f64>,
    pub directions: usize,
}

impl OrthoReport {
    pub fn order(&self, m: usize) -> f64 {
        self.max_by_order[m - 1]
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Central finite difference of order `m` along `direction`:
/// `Σ_i (−1)^i C(m, i) f(x + (m/2 − i)·h·d) / h^m`.
pub fn directional_derivative(
    f: &(dyn Fn(f64, &[f64]) -> f64 + Sync),
    beta: f64,
    point: &[f64],
    direction: &[f64],
    m: usize,
    h: f64,
) -> f64 {
    let mut buf = vec![0.0; point.len()];
    let mut acc = 0.0;
    for i in 0..=m {
        let t = (m as f64 / 2.0 - i as f64) * h;
        for ((b, p), d) in buf.iter_mut().zip(point).zip(direction) {
            *b = p + t * d;
        }
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * binomial(m, i) * f(beta, &buf);
    }
    acc / h.powi(m as i32)
}

/// Random unit directions in `R^dim`, reproducible from `seed`.
pub fn random_unit_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Maximum `|d^m/dt^m f(β0, x0 + t·d)|` at `t = 0` over the given directions,
/// for `m = 1..=max_order`. `h = None` uses [`default_step`] per order.
pub fn certify_function(
    f: &(dyn Fn(f64, &[f64]) -> f64 + Sync),
    beta0: f64,
    point: &[f64],
    directions: &[Vec<f64>],
    max_order: usize,
    h: Option<f64>,
) -> OrthoReport {
    let max_by_order = (1..=max_order)
        .map(|m| {
            let step = h.unwrap_or_else(|| default_step(m));
            directions
                .par_iter()
                .map(|d| directional_derivative(f, beta0, point, d, m, step).abs())
                .reduce(|| 0.0, f64::max)
        })
        .collect();
    OrthoReport { max_by_order, directions: directions.len() }
}

/// Seed for the random directions used by [`certify_orthogonality`].
pub const CERTIFY_SEED: u64 = 0x5eed_0f_0a7;

pub fn certify_orthogonality(
    lifted: &LiftedSystem,
    beta0: f64,
    eta_tilde0: &[f64],
    max_order: usize,
    directions: usize,
    h: Option<f64>,
) -> Result<OrthoReport, OrthoError> {
    if max_order > lifted.k {
        return Err(OrthoError::InvalidArgument(format!("max order {max_order} exceeds lift order {}", lifted.k)));
    }
    let dirs = random_unit_directions(lifted.dim_eta_tilde(), directions, CERTIFY_SEED);
    let f = |beta: f64, et: &[f64]| lifted.f_tilde(beta, et);
    Ok(certify_function(&f, beta0, eta_tilde0, &dirs, max_order, h))
}

#[cfg(test)]
mod tests;
