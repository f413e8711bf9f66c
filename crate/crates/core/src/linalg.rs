//! Small dense linear algebra: a row-major matrix, Householder QR with column
//! pivoting, and a Cholesky factorization for aggregated Gram matrices.

use thiserror::Error;

use crate::num::{dot, Scalar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is rank deficient: numerical rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },
    #[error("not enough rows: {rows} rows for {cols} columns")]
    NotEnoughRows { rows: usize, cols: usize },
    #[error("matrix is not positive definite (pivot {index})")]
    NotPositiveDefinite { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    /// Builds a matrix from row-major data.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major buffer has wrong length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |i, j| self.get(i, cols[j]))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self { rows: rows.len(), cols: self.cols, data }
    }

    /// Copy of the matrix with row `i` removed.
    pub fn without_row(&self, i: usize) -> Self {
        let mut data = Vec::with_capacity((self.rows - 1) * self.cols);
        data.extend_from_slice(&self.data[..i * self.cols]);
        data.extend_from_slice(&self.data[(i + 1) * self.cols..]);
        Self { rows: self.rows - 1, cols: self.cols, data }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ v`.
    pub fn t_mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * vi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    let v = out.get(i, j) + a * other.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    /// Gram matrix `selfᵀ self`.
    pub fn gram(&self) -> Self {
        let k = self.cols;
        let mut out = Self::zeros(k, k);
        for i in 0..self.rows {
            add_outer(&mut out, self.row(i));
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// `m += v vᵀ`.
pub fn add_outer<T: Scalar>(m: &mut Matrix<T>, v: &[T]) {
    let k = v.len();
    debug_assert_eq!((m.rows, m.cols), (k, k));
    for a in 0..k {
        let va = v[a];
        if va == T::zero() {
            continue;
        }
        let row = m.row_mut(a);
        for b in 0..k {
            row[b] = row[b] + va * v[b];
        }
    }
}

/// What to do when the column-pivoted QR finds numerically dependent columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankPolicy {
    /// Report `RankDeficient`.
    #[default]
    Strict,
    /// Keep the leading independent pivoted columns; aliased columns get zero
    /// coefficients and the projection is onto the column space.
    Truncate,
}

/// Default relative threshold on `|R_kk| / |R_00|` for declaring a column dependent.
pub fn default_rank_tol<T: Scalar>() -> T {
    T::of(1e-9).max(T::epsilon() * T::of(100.0))
}

/// Householder QR with column pivoting of an `n × k` matrix, stopped at the
/// numerical rank.
#[derive(Debug, Clone)]
pub struct PivotedQr<T> {
    rows: usize,
    cols: usize,
    /// Householder vectors; `reflectors[s]` acts on rows `s..n`.
    reflectors: Vec<Vec<T>>,
    betas: Vec<T>,
    /// Upper-triangular `rank × cols` block in pivoted column order, row-major.
    r: Vec<T>,
    perm: Vec<usize>,
    rank: usize,
}

impl<T: Scalar> PivotedQr<T> {
    pub fn factor(a: &Matrix<T>, tol: T) -> Self {
        let (n, k) = (a.nrows(), a.ncols());
        // column-major working copy
        let mut cols: Vec<Vec<T>> = (0..k).map(|j| a.column(j)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        let mut reflectors = Vec::new();
        let mut betas = Vec::new();
        let mut diag0 = T::zero();
        let steps = n.min(k);
        let mut rank = 0;

        for s in 0..steps {
            // pivot on the largest remaining column norm, recomputed exactly
            let mut best = s;
            let mut best_norm = T::zero();
            for (j, col) in cols.iter().enumerate().skip(s) {
                let nrm = col[s..].iter().map(|&v| v * v).sum::<T>().sqrt();
                if nrm > best_norm {
                    best_norm = nrm;
                    best = j;
                }
            }
            if s == 0 {
                diag0 = best_norm;
            }
            if best_norm == T::zero() || best_norm <= tol * diag0 {
                break;
            }
            cols.swap(s, best);
            perm.swap(s, best);

            let x = &cols[s][s..];
            let alpha = if x[0] >= T::zero() { -best_norm } else { best_norm };
            let mut v: Vec<T> = x.to_vec();
            v[0] = v[0] - alpha;
            let vtv: T = v.iter().map(|&t| t * t).sum();
            let beta = if vtv == T::zero() { T::zero() } else { T::of(2.0) / vtv };
            for col in cols.iter_mut().skip(s + 1) {
                let w = beta * dot(&v, &col[s..]);
                for (c, &vi) in col[s..].iter_mut().zip(&v) {
                    *c = *c - w * vi;
                }
            }
            cols[s][s] = alpha;
            for c in cols[s][s + 1..].iter_mut() {
                *c = T::zero();
            }
            reflectors.push(v);
            betas.push(beta);
            rank += 1;
        }

        let mut r = vec![T::zero(); rank * k];
        for i in 0..rank {
            for j in i..k {
                r[i * k + j] = cols[j][i];
            }
        }
        Self { rows: n, cols: k, reflectors, betas, r, perm, rank }
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.cols
    }

    /// Column permutation: pivoted position `s` holds original column `perm[s]`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Original indices of the columns kept in the column-space basis.
    pub fn independent_columns(&self) -> &[usize] {
        &self.perm[..self.rank]
    }

    /// `|R_ss|` for the retained pivots.
    pub fn r_diagonal(&self) -> Vec<T> {
        (0..self.rank).map(|i| self.r[i * self.cols + i].abs()).collect()
    }

    fn apply_qt(&self, y: &mut [T]) {
        for (s, (v, &beta)) in self.reflectors.iter().zip(&self.betas).enumerate() {
            let w = beta * dot(v, &y[s..]);
            for (yi, &vi) in y[s..].iter_mut().zip(v) {
                *yi = *yi - w * vi;
            }
        }
    }

    fn apply_q(&self, y: &mut [T]) {
        for (s, (v, &beta)) in self.reflectors.iter().zip(&self.betas).enumerate().rev() {
            let w = beta * dot(v, &y[s..]);
            for (yi, &vi) in y[s..].iter_mut().zip(v) {
                *yi = *yi - w * vi;
            }
        }
    }

    /// Least-squares coefficients in the original column order. Columns outside
    /// the retained basis get zero.
    pub fn solve(&self, y: &[T]) -> Vec<T> {
        assert_eq!(y.len(), self.rows);
        let mut qty = y.to_vec();
        self.apply_qt(&mut qty);
        let r = self.rank;
        let k = self.cols;
        let mut z = vec![T::zero(); r];
        for i in (0..r).rev() {
            let mut acc = qty[i];
            for j in i + 1..r {
                acc = acc - self.r[i * k + j] * z[j];
            }
            z[i] = acc / self.r[i * k + i];
        }
        let mut coef = vec![T::zero(); k];
        for (s, &zi) in z.iter().enumerate() {
            coef[self.perm[s]] = zi;
        }
        coef
    }

    /// `y − P y` where `P` projects onto the retained column space.
    pub fn residuals(&self, y: &[T]) -> Vec<T> {
        assert_eq!(y.len(), self.rows);
        let mut e = y.to_vec();
        self.apply_qt(&mut e);
        for v in e.iter_mut().take(self.rank) {
            *v = T::zero();
        }
        self.apply_q(&mut e);
        e
    }

    /// Diagonal of the projection matrix, computed as squared row norms of the
    /// thin orthogonal factor.
    pub fn leverages(&self) -> Vec<T> {
        let mut lev = vec![T::zero(); self.rows];
        let mut e = vec![T::zero(); self.rows];
        for s in 0..self.rank {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[s] = T::one();
            self.apply_q(&mut e);
            for (l, &q) in lev.iter_mut().zip(&e) {
                *l = *l + q * q;
            }
        }
        lev
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    n: usize,
    l: Vec<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Fails when a pivot falls below `tol` times the largest diagonal entry.
    pub fn factor(a: &Matrix<T>, tol: T) -> Result<Self, LinalgError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: a.ncols() });
        }
        let max_diag = (0..n).fold(T::zero(), |m, i| m.max(a.get(i, i).abs()));
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for p in 0..j {
                d = d - l[j * n + p] * l[j * n + p];
            }
            if !(d > tol * max_diag) {
                return Err(LinalgError::NotPositiveDefinite { index: j });
            }
            let dj = d.sqrt();
            l[j * n + j] = dj;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for p in 0..j {
                    s = s - l[i * n + p] * l[j * n + p];
                }
                l[i * n + j] = s / dj;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `L w = b`.
    pub fn forward(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut w = b.to_vec();
        for i in 0..n {
            let mut s = w[i];
            for p in 0..i {
                s = s - self.l[i * n + p] * w[p];
            }
            w[i] = s / self.l[i * n + i];
        }
        w
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x = self.forward(b);
        for i in (0..n).rev() {
            let mut s = x[i];
            for p in i + 1..n {
                s = s - self.l[p * n + i] * x[p];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    /// `vᵀ A⁻¹ v`.
    pub fn inv_quad(&self, v: &[T]) -> T {
        let w = self.forward(v);
        w.iter().map(|&t| t * t).sum()
    }
}
