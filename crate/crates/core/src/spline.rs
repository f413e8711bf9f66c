//! Polynomial-spline bases on `[0, 1]` and the regression designs built from
//! them.
//!
//! Each component is described by a [`BasisSpec`]: the spline order and the
//! knot sequence `0 = φ₀ < φ₁ < … < φ_q < φ_{q+1} = 1`. Basis functions are the
//! B-splines of the clamped knot vector (each endpoint repeated `order` times),
//! so a component spans the full space of splines of that order on those knots
//! and has `q + order` basis functions.

use thiserror::Error;

use crate::data::Dataset;
use crate::linalg::Matrix;
use crate::num::{mean, Scalar};
use crate::quantile::quantile_sorted;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("evaluation point {0} outside [0, 1]")]
    OutOfDomain(f64),
    #[error("invalid knot sequence: {0}")]
    InvalidKnots(String),
    #[error("quantile knots degenerate: {distinct} distinct interior knots, {wanted} requested")]
    DegenerateKnots { wanted: usize, distinct: usize },
    #[error("spline order must be at least 1")]
    InvalidOrder,
    #[error("varying-coefficient design needs an index variable")]
    MissingIndexVariable,
    #[error("expected {expected} basis specs, got {got}")]
    SpecCount { expected: usize, got: usize },
    #[error("cannot drop component {index} of a {p}-component additive model")]
    InvalidDrop { index: usize, p: usize },
    #[error("need at least two samples for quantile knots")]
    TooFewSamples,
}

/// `q + 2` equally spaced knots on `[0, 1]`.
pub fn uniform_knots<T: Scalar>(q: usize) -> Vec<T> {
    let denom = T::of_usize(q + 1);
    (0..=q + 1)
        .map(|k| if k == q + 1 { T::one() } else { T::of_usize(k) / denom })
        .collect()
}

/// Knots at the sample quantiles `k / (q + 1)`, `k = 1..=q`, of data already
/// rescaled to `[0, 1]`, with endpoints 0 and 1.
pub fn quantile_knots<T: Scalar>(samples: &[T], q: usize) -> Result<Vec<T>, SplineError> {
    if samples.len() < 2 {
        return Err(SplineError::TooFewSamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let interior: Vec<T> =
        (1..=q).map(|k| quantile_sorted(&sorted, T::of_usize(k) / T::of_usize(q + 1))).collect();
    knots_from_interior(&interior)
}

/// Closes an interior knot sequence with 0 and 1, rejecting ties or knots on
/// the boundary.
pub fn knots_from_interior<T: Scalar>(interior: &[T]) -> Result<Vec<T>, SplineError> {
    let mut knots = Vec::with_capacity(interior.len() + 2);
    knots.push(T::zero());
    knots.extend_from_slice(interior);
    knots.push(T::one());
    let distinct = knots.windows(2).filter(|w| w[1] > w[0]).count();
    if distinct != interior.len() + 1 {
        return Err(SplineError::DegenerateKnots {
            wanted: interior.len(),
            distinct: distinct.saturating_sub(1),
        });
    }
    Ok(knots)
}

/// Order and knot sequence of one spline component.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec<T> {
    order: usize,
    knots: Vec<T>,
    /// Clamped knot vector used by the recursion.
    augmented: Vec<T>,
}

impl<T: Scalar> BasisSpec<T> {
    pub fn new(order: usize, knots: Vec<T>) -> Result<Self, SplineError> {
        if order == 0 {
            return Err(SplineError::InvalidOrder);
        }
        if knots.len() < 2 {
            return Err(SplineError::InvalidKnots("need at least the two endpoints".into()));
        }
        if knots[0] != T::zero() || *knots.last().unwrap() != T::one() {
            return Err(SplineError::InvalidKnots("endpoints must be exactly 0 and 1".into()));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SplineError::InvalidKnots("knots must be strictly increasing".into()));
        }
        let mut augmented = vec![T::zero(); order - 1];
        augmented.extend_from_slice(&knots);
        augmented.extend(std::iter::repeat(T::one()).take(order - 1));
        Ok(Self { order, knots, augmented })
    }

    pub fn uniform(order: usize, q: usize) -> Result<Self, SplineError> {
        Self::new(order, uniform_knots(q))
    }

    /// Degree-one polynomial on `[0, 1]`: order 2 without interior knots.
    pub fn linear() -> Self {
        Self::new(2, vec![T::zero(), T::one()]).expect("valid linear spec")
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }

    /// Full knot sequence including the endpoints.
    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    #[inline]
    pub fn interior_knot_count(&self) -> usize {
        self.knots.len() - 2
    }

    /// Number of basis functions, `q + order`.
    #[inline]
    pub fn dimension(&self) -> usize {
        self.interior_knot_count() + self.order
    }

    /// Index `μ` into the clamped knot vector with `t_μ ≤ x < t_{μ+1}`; the
    /// last nonempty span for `x = 1`.
    fn span(&self, x: T) -> usize {
        let t = &self.augmented;
        let first = self.order - 1;
        let last = first + self.interior_knot_count();
        if x >= T::one() {
            return last;
        }
        // knots are few; linear scan keeps this simple
        let mut mu = first;
        while mu < last && x >= t[mu + 1] {
            mu += 1;
        }
        mu
    }

    /// Writes the `order` possibly nonzero basis values at `x` into `out` and
    /// returns the index of the first one.
    fn eval_local(&self, x: T, out: &mut [T]) -> usize {
        let t = &self.augmented;
        let p = self.order - 1;
        let mu = self.span(x);
        let mut left = vec![T::zero(); p + 1];
        let mut right = vec![T::zero(); p + 1];
        out[0] = T::one();
        for j in 1..=p {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = T::zero();
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        mu + 1 - self.order
    }

    /// All `dimension()` basis values at `x`.
    pub fn eval(&self, x: T) -> Result<Vec<T>, SplineError> {
        let mut out = vec![T::zero(); self.dimension()];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// Like [`eval`](Self::eval) but writes into a caller buffer of length
    /// `dimension()`.
    pub fn eval_into(&self, x: T, out: &mut [T]) -> Result<(), SplineError> {
        if !(x >= T::zero() && x <= T::one()) {
            return Err(SplineError::OutOfDomain(x.as_f64()));
        }
        debug_assert_eq!(out.len(), self.dimension());
        out.iter_mut().for_each(|v| *v = T::zero());
        let mut local = vec![T::zero(); self.order];
        let first = self.eval_local(x, &mut local);
        out[first..first + self.order].copy_from_slice(&local);
        Ok(())
    }
}

/// Which model a design encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignKind {
    Additive,
    VaryingCoefficient,
    /// Additive model with component `ℓ` (zero-based) removed.
    AdditiveDropped(usize),
}

/// Row map of an additive model: per component, the basis without its first
/// function, each column shifted by a fixed mean.
///
/// Dropping one function per component removes the intercept aliasing caused
/// by the partition of unity; centering enforces the empirical zero-mean
/// constraint on each component.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveBasis<T> {
    specs: Vec<BasisSpec<T>>,
    /// Components that contribute columns, in order.
    included: Vec<usize>,
    /// Column index → component index.
    column_map: Vec<usize>,
    means: Vec<T>,
}

impl<T: Scalar> AdditiveBasis<T> {
    /// Uncentered basis for `specs`, optionally without component `drop`.
    pub fn new(specs: Vec<BasisSpec<T>>, drop: Option<usize>) -> Result<Self, SplineError> {
        let p = specs.len();
        if let Some(l) = drop {
            if l >= p || p < 2 {
                return Err(SplineError::InvalidDrop { index: l, p });
            }
        }
        let included: Vec<usize> = (0..p).filter(|&j| Some(j) != drop).collect();
        let column_map: Vec<usize> =
            included.iter().flat_map(|&j| std::iter::repeat(j).take(specs[j].dimension() - 1)).collect();
        let means = vec![T::zero(); column_map.len()];
        Ok(Self { specs, included, column_map, means })
    }

    pub fn specs(&self) -> &[BasisSpec<T>] {
        &self.specs
    }

    pub fn included(&self) -> &[usize] {
        &self.included
    }

    pub fn column_map(&self) -> &[usize] {
        &self.column_map
    }

    pub fn means(&self) -> &[T] {
        &self.means
    }

    pub fn ncols(&self) -> usize {
        self.column_map.len()
    }

    /// Sets the centering vector (one entry per column).
    pub fn with_means(mut self, means: Vec<T>) -> Self {
        assert_eq!(means.len(), self.ncols());
        self.means = means;
        self
    }

    /// Uncentered row for one observation; `values[j]` is the value of
    /// component `j` (entries of dropped components are ignored).
    pub fn raw_row_into(&self, values: &[T], out: &mut [T]) -> Result<(), SplineError> {
        let mut at = 0;
        for &j in &self.included {
            let spec = &self.specs[j];
            let k = spec.dimension();
            let mut buf = vec![T::zero(); k];
            spec.eval_into(values[j], &mut buf)?;
            out[at..at + k - 1].copy_from_slice(&buf[1..]);
            at += k - 1;
        }
        Ok(())
    }

    /// Centered row.
    pub fn row_into(&self, values: &[T], out: &mut [T]) -> Result<(), SplineError> {
        self.raw_row_into(values, out)?;
        for (o, &m) in out.iter_mut().zip(&self.means) {
            *o = *o - m;
        }
        Ok(())
    }

    /// Uncentered rows for column-stored component values.
    pub fn raw_matrix(&self, columns: &[&[T]]) -> Result<Matrix<T>, SplineError> {
        let n = columns.first().map_or(0, |c| c.len());
        let k = self.ncols();
        let mut m = Matrix::zeros(n, k);
        let mut vals = vec![T::zero(); columns.len()];
        for i in 0..n {
            for (v, c) in vals.iter_mut().zip(columns) {
                *v = c[i];
            }
            self.raw_row_into(&vals, m.row_mut(i))?;
        }
        Ok(m)
    }
}

/// Assembled regression design.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<T> {
    pub matrix: Matrix<T>,
    pub kind: DesignKind,
    /// Model component owning each column.
    pub column_map: Vec<usize>,
    pub specs: Vec<BasisSpec<T>>,
    /// Column centering applied (additive designs only; empty otherwise).
    pub column_means: Vec<T>,
}

impl<T: Scalar> DesignMatrix<T> {
    #[inline]
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Additive design over column-stored component values, centered at the
/// sample column means.
pub fn additive_from_columns<T: Scalar>(
    columns: &[&[T]],
    specs: &[BasisSpec<T>],
    drop: Option<usize>,
) -> Result<(DesignMatrix<T>, AdditiveBasis<T>), SplineError> {
    if columns.len() != specs.len() {
        return Err(SplineError::SpecCount { expected: columns.len(), got: specs.len() });
    }
    let basis = AdditiveBasis::new(specs.to_vec(), drop)?;
    let mut matrix = basis.raw_matrix(columns)?;
    let means: Vec<T> = (0..matrix.ncols()).map(|j| mean(&matrix.column(j))).collect();
    for i in 0..matrix.nrows() {
        for (v, &m) in matrix.row_mut(i).iter_mut().zip(&means) {
            *v = *v - m;
        }
    }
    let basis = basis.with_means(means.clone());
    let kind = match drop {
        Some(l) => DesignKind::AdditiveDropped(l),
        None => DesignKind::Additive,
    };
    let design = DesignMatrix {
        matrix,
        kind,
        column_map: basis.column_map().to_vec(),
        specs: specs.to_vec(),
        column_means: means,
    };
    Ok((design, basis))
}

/// Additive design over all covariates of a dataset.
pub fn design_additive<T: Scalar>(
    d: &Dataset<T>,
    specs: &[BasisSpec<T>],
    drop: Option<usize>,
) -> Result<DesignMatrix<T>, SplineError> {
    let cols: Vec<&[T]> = d.x.iter().map(Vec::as_slice).collect();
    additive_from_columns(&cols, specs, drop).map(|(d, _)| d)
}

/// Varying-coefficient design: row `i` is `(Γ₀(zᵢ), x_{i1} Γ₁(zᵢ), …, x_{ip} Γ_p(zᵢ))`.
/// `specs[0]` belongs to the intercept function.
pub fn varycoef_from_columns<T: Scalar>(
    z: &[T],
    xs: &[&[T]],
    specs: &[BasisSpec<T>],
) -> Result<DesignMatrix<T>, SplineError> {
    if specs.len() != xs.len() + 1 {
        return Err(SplineError::SpecCount { expected: xs.len() + 1, got: specs.len() });
    }
    let n = z.len();
    let column_map: Vec<usize> = specs
        .iter()
        .enumerate()
        .flat_map(|(j, s)| std::iter::repeat(j).take(s.dimension()))
        .collect();
    let k = column_map.len();
    let mut matrix = Matrix::zeros(n, k);
    let mut bufs: Vec<Vec<T>> = specs.iter().map(|s| vec![T::zero(); s.dimension()]).collect();
    for i in 0..n {
        let row = matrix.row_mut(i);
        let mut at = 0;
        for (j, spec) in specs.iter().enumerate() {
            let buf = &mut bufs[j];
            spec.eval_into(z[i], buf)?;
            let scale = if j == 0 { T::one() } else { xs[j - 1][i] };
            for (o, &b) in row[at..at + buf.len()].iter_mut().zip(buf.iter()) {
                *o = scale * b;
            }
            at += buf.len();
        }
    }
    Ok(DesignMatrix {
        matrix,
        kind: DesignKind::VaryingCoefficient,
        column_map,
        specs: specs.to_vec(),
        column_means: Vec::new(),
    })
}

/// Varying-coefficient design over all covariates of a dataset, indexed by `z`.
pub fn design_varycoef<T: Scalar>(d: &Dataset<T>, specs: &[BasisSpec<T>]) -> Result<DesignMatrix<T>, SplineError> {
    let z = d.z.as_deref().ok_or(SplineError::MissingIndexVariable)?;
    let xs: Vec<&[T]> = d.x.iter().map(Vec::as_slice).collect();
    varycoef_from_columns(z, &xs, specs)
}
