//! Least-squares fits, leverages and exact leave-one-out prediction errors.
//!
//! The production path fits once and uses `ε̂ᵢ = eᵢ / (1 − pᵢ)`, where `e` are
//! full-sample residuals and `pᵢ` the diagonal of the projection onto the
//! design's column space. [`loocv_naive`] refits `n` times and exists as the
//! reference the fast path is checked against. Deleting row `i` changes the
//! coefficients by `−(1 − pᵢ)⁻¹ (DᵀD)⁻¹ dᵢ eᵢ` (Sherman–Morrison), which is
//! where the shortcut comes from.

use thiserror::Error;

use crate::linalg::{default_rank_tol, Matrix, PivotedQr, RankPolicy};
use crate::num::Scalar;
use crate::spline::DesignKind;

/// Leverage cutoff: `pᵢ ≥ 1 − LEVERAGE_TOL` leaves row `i` without a
/// well-defined held-out fit.
pub const LEVERAGE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoocvError {
    #[error("design is rank deficient: numerical rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },
    #[error("not enough rows: {rows} rows for {cols} effective columns")]
    NotEnoughRows { rows: usize, cols: usize },
    #[error("observation {index} has leverage {leverage}; its held-out fit is undefined")]
    DegenerateLeverage { index: usize, leverage: f64 },
    #[error("design loses rank when observation {0} is deleted")]
    RankDeficientOnDeletion(usize),
    #[error("response has {got} values, design has {expected} rows")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions<T> {
    pub policy: RankPolicy,
    /// Relative pivot threshold for the rank decision.
    pub rank_tol: T,
}

impl<T: Scalar> Default for FitOptions<T> {
    fn default() -> Self {
        Self { policy: RankPolicy::Strict, rank_tol: default_rank_tol() }
    }
}

impl<T: Scalar> FitOptions<T> {
    pub fn truncating() -> Self {
        Self { policy: RankPolicy::Truncate, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel<T> {
    pub coefficients: Vec<T>,
    pub residuals: Vec<T>,
    /// Numerical rank of the design.
    pub rank: usize,
    pub design_kind: Option<DesignKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoocvResult<T> {
    pub leverages: Vec<T>,
    /// Full-sample residuals `e`.
    pub residuals: Vec<T>,
    /// Leave-one-out prediction errors `ε̂`.
    pub errors: Vec<T>,
    /// `n⁻¹ Σ ε̂ᵢ²`.
    pub ape: T,
    /// Effective column count (numerical rank).
    pub kappa: usize,
}

impl<T: Scalar> LoocvResult<T> {
    fn from_errors(leverages: Vec<T>, residuals: Vec<T>, errors: Vec<T>, kappa: usize) -> Self {
        let ape = mean_square(&errors);
        Self { leverages, residuals, errors, ape, kappa }
    }
}

pub fn mean_square<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&e| e * e).sum::<T>() / T::of_usize(v.len().max(1))
}

fn factor<T: Scalar>(d: &Matrix<T>, opts: &FitOptions<T>) -> Result<PivotedQr<T>, LoocvError> {
    if d.nrows() < d.ncols() && opts.policy == RankPolicy::Strict {
        return Err(LoocvError::NotEnoughRows { rows: d.nrows(), cols: d.ncols() });
    }
    let qr = PivotedQr::factor(d, opts.rank_tol);
    if opts.policy == RankPolicy::Strict && qr.rank() < d.ncols() {
        return Err(LoocvError::RankDeficient { rank: qr.rank(), cols: d.ncols() });
    }
    Ok(qr)
}

fn check_len<T: Scalar>(d: &Matrix<T>, y: &[T]) -> Result<(), LoocvError> {
    if d.nrows() != y.len() {
        return Err(LoocvError::LengthMismatch { expected: d.nrows(), got: y.len() });
    }
    Ok(())
}

/// Minimizes `‖y − D b‖²` through a column-pivoted Householder QR.
pub fn least_squares<T: Scalar>(d: &Matrix<T>, y: &[T], opts: &FitOptions<T>) -> Result<FittedModel<T>, LoocvError> {
    check_len(d, y)?;
    let qr = factor(d, opts)?;
    if d.nrows() <= qr.rank() {
        return Err(LoocvError::NotEnoughRows { rows: d.nrows(), cols: qr.rank() });
    }
    Ok(FittedModel { coefficients: qr.solve(y), residuals: qr.residuals(y), rank: qr.rank(), design_kind: None })
}

/// Diagonal of `D (DᵀD)⁻¹ Dᵀ` without forming the `n × n` projection.
pub fn leverages<T: Scalar>(d: &Matrix<T>, opts: &FitOptions<T>) -> Result<Vec<T>, LoocvError> {
    Ok(factor(d, opts)?.leverages())
}

/// Leave-one-out errors from a single full-sample fit.
pub fn loocv_fast<T: Scalar>(d: &Matrix<T>, y: &[T], opts: &FitOptions<T>) -> Result<LoocvResult<T>, LoocvError> {
    check_len(d, y)?;
    let qr = factor(d, opts)?;
    let k = qr.rank();
    if d.nrows() <= k + 1 {
        return Err(LoocvError::NotEnoughRows { rows: d.nrows(), cols: k });
    }
    let lev = qr.leverages();
    let e = qr.residuals(y);
    let cutoff = T::one() - T::of(LEVERAGE_TOL);
    let mut errors = Vec::with_capacity(e.len());
    for (i, (&ei, &pi)) in e.iter().zip(&lev).enumerate() {
        if pi >= cutoff {
            return Err(LoocvError::DegenerateLeverage { index: i, leverage: pi.as_f64() });
        }
        errors.push(ei / (T::one() - pi));
    }
    Ok(LoocvResult::from_errors(lev, e, errors, k))
}

/// Leave-one-out errors by `n` explicit refits, each without one row.
pub fn loocv_naive<T: Scalar>(d: &Matrix<T>, y: &[T], opts: &FitOptions<T>) -> Result<LoocvResult<T>, LoocvError> {
    check_len(d, y)?;
    let full = factor(d, opts)?;
    let k = full.rank();
    let n = d.nrows();
    let mut errors = Vec::with_capacity(n);
    for i in 0..n {
        let di = d.without_row(i);
        let mut yi = y.to_vec();
        yi.remove(i);
        let qr = PivotedQr::factor(&di, opts.rank_tol);
        if qr.rank() < k {
            return Err(LoocvError::RankDeficientOnDeletion(i));
        }
        let b = qr.solve(&yi);
        let pred: T = d.row(i).iter().zip(&b).map(|(&a, &c)| a * c).sum();
        errors.push(y[i] - pred);
    }
    Ok(LoocvResult::from_errors(full.leverages(), full.residuals(y), errors, k))
}
