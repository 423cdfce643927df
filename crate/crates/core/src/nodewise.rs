//! Row-wise node-wise Lasso estimates of the inverse Gram matrix.
//!
//! Row `j` regresses control `j` on all other controls (no intercept, raw
//! columns), then rescales `(1, −ψ̂_j)` by the inner-product variance
//! `σ̂_j² = (1/n) X_jᵀ (X_j − X_{−j} ψ̂_j)`, with the `1` placed at position `j`.
//! Only requested rows are ever estimated; rows outside the active set are
//! implicitly zero.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::lasso::{fit_lasso, LassoError, LassoProblem};
use crate::numkit::{dot, Matrix};

/// Relative floor on `σ̂_j²`, as a fraction of the sample variance of `X_j`.
pub const SIGMA2_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodewiseError {
    #[error("node-wise regression needs at least 2 columns, got {0}")]
    TooFewColumns(usize),
    #[error("row {j}: penalty must be positive, got {lambda}")]
    InvalidPenalty { j: usize, lambda: f64 },
    #[error("row {j}: index out of range for p = {p}")]
    IndexOutOfRange { j: usize, p: usize },
    #[error("row {j}: residual variance {sigma2:e} below floor {floor:e}")]
    DegenerateVariance { j: usize, sigma2: f64, floor: f64 },
    #[error("row {j}: {source}")]
    Lasso { j: usize, source: LassoError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodewiseRow {
    pub j: usize,
    pub psi_hat: Vec<f64>,
    pub sigma2_hat: f64,
    pub row: Vec<f64>,
}

impl NodewiseRow {
    pub fn l1_norm(&self) -> f64 {
        self.row.iter().map(|v| v.abs()).sum()
    }
}

pub fn nodewise_row(x_train: &Matrix, j: usize, lambda_j: f64) -> Result<NodewiseRow, NodewiseError> {
    let (n, p) = (x_train.rows(), x_train.cols());
    if p < 2 {
        return Err(NodewiseError::TooFewColumns(p));
    }
    if j >= p {
        return Err(NodewiseError::IndexOutOfRange { j, p });
    }
    if !(lambda_j > 0.0 && lambda_j.is_finite()) {
        return Err(NodewiseError::InvalidPenalty { j, lambda: lambda_j });
    }
    let target = x_train.column(j);
    let others = x_train.without_column(j);
    let problem = LassoProblem::new(&others, &target, lambda_j).intercept(false).standardize(false);
    let fit = fit_lasso(&problem).map_err(|source| NodewiseError::Lasso { j, source })?;
    let psi_hat = fit.coefs;

    let inv_n = 1.0 / n as f64;
    let sigma2_hat = (0..n)
        .map(|i| {
            let xi = x_train.row(i);
            let fitted = dot(&xi[..j], &psi_hat[..j]) + dot(&xi[j + 1..], &psi_hat[j..]);
            xi[j] * (xi[j] - fitted)
        })
        .sum::<f64>()
        * inv_n;

    let m = target.iter().sum::<f64>() * inv_n;
    let var = target.iter().map(|v| (v - m) * (v - m)).sum::<f64>() * inv_n;
    let floor = SIGMA2_FLOOR * var;
    if !(sigma2_hat >= floor) || sigma2_hat <= 0.0 {
        return Err(NodewiseError::DegenerateVariance { j, sigma2: sigma2_hat, floor });
    }

    let mut row = Vec::with_capacity(p);
    row.extend(psi_hat[..j].iter().map(|v| -v / sigma2_hat));
    row.push(1.0 / sigma2_hat);
    row.extend(psi_hat[j..].iter().map(|v| -v / sigma2_hat));
    Ok(NodewiseRow { j, psi_hat, sigma2_hat, row })
}

/// Inverse-Gram estimate with all rows outside `active_rows` set to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsifiedTheta {
    p: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl SparsifiedTheta {
    /// The zero operator on `R^p`.
    pub fn empty(p: usize) -> Self {
        Self { p, rows: BTreeMap::new() }
    }

    pub fn from_rows(p: usize, rows: BTreeMap<usize, Vec<f64>>) -> Self {
        assert!(rows.iter().all(|(&j, r)| j < p && r.len() == p), "row index or length out of range");
        Self { p, rows }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn active_rows(&self) -> Vec<usize> {
        self.rows.keys().copied().collect()
    }

    pub fn row(&self, j: usize) -> Option<&[f64]> {
        self.rows.get(&j).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Keeps only the listed rows.
    pub fn restrict(&self, indices: &[usize]) -> SparsifiedTheta {
        let rows = indices.iter().filter_map(|j| self.rows.get(j).map(|r| (*j, r.clone()))).collect();
        Self { p: self.p, rows }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.p, self.p);
        for (&j, r) in &self.rows {
            for (k, v) in r.iter().enumerate() {
                m[(j, k)] = *v;
            }
        }
        m
    }

    pub fn max_row_l1(&self) -> f64 {
        self.rows.values().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }
}

pub fn apply_theta(theta: &SparsifiedTheta, v: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), theta.p, "apply_theta dimension mismatch");
    let mut out = vec![0.0; theta.p];
    for (&j, r) in &theta.rows {
        out[j] = dot(r, v);
    }
    out
}

/// Estimates exactly the rows in `indices`; `lambdas` is indexed by control.
pub fn nodewise_rows(x_train: &Matrix, indices: &[usize], lambdas: &[f64]) -> Result<SparsifiedTheta, NodewiseError> {
    let mut cache = NodewiseCache::new(x_train);
    cache.ensure(indices, |j| lambdas[j])?;
    Ok(cache.theta(indices))
}

/// Per-fold store of estimated rows, so that rows needed twice (for extra
/// support selection and for the final operator) are fitted once.
#[derive(Debug)]
pub struct NodewiseCache<'a> {
    x_train: &'a Matrix,
    rows: BTreeMap<usize, NodewiseRow>,
    fits: usize,
}

impl<'a> NodewiseCache<'a> {
    pub fn new(x_train: &'a Matrix) -> Self {
        Self { x_train, rows: BTreeMap::new(), fits: 0 }
    }

    /// Number of node-wise Lasso fits performed so far.
    pub fn fits(&self) -> usize {
        self.fits
    }

    /// Estimates every listed row not yet cached. Rows run in parallel; the
    /// result does not depend on scheduling.
    pub fn ensure(
        &mut self,
        indices: &[usize],
        lambda_of: impl Fn(usize) -> f64 + Sync,
    ) -> Result<(), NodewiseError> {
        let p = self.x_train.cols();
        if let Some(&j) = indices.iter().find(|&&j| j >= p) {
            return Err(NodewiseError::IndexOutOfRange { j, p });
        }
        let mut missing: Vec<usize> = indices.iter().copied().filter(|j| !self.rows.contains_key(j)).collect();
        missing.sort_unstable();
        missing.dedup();
        let x = self.x_train;
        let fitted: Vec<Result<NodewiseRow, NodewiseError>> =
            missing.par_iter().map(|&j| nodewise_row(x, j, lambda_of(j))).collect();
        self.fits += missing.len();
        for row in fitted {
            let row = row?;
            self.rows.insert(row.j, row);
        }
        Ok(())
    }

    pub fn get(&self, j: usize) -> Option<&NodewiseRow> {
        self.rows.get(&j)
    }

    /// Operator built from cached rows among `indices`.
    pub fn theta(&self, indices: &[usize]) -> SparsifiedTheta {
        let rows = indices.iter().filter_map(|j| self.rows.get(j).map(|r| (*j, r.row.clone()))).collect();
        SparsifiedTheta { p: self.x_train.cols(), rows }
    }
}

/// `‖Θ̃ · gram − I‖_max`.
pub fn gram_alignment(theta_full: &SparsifiedTheta, gram: &Matrix) -> f64 {
    let p = theta_full.p;
    assert_eq!((gram.rows(), gram.cols()), (p, p), "gram dimension mismatch");
    let prod = theta_full.to_dense().matmul(gram);
    prod.sub(&Matrix::identity(p)).max_abs()
}
