//! Sharded execution of the additive variable-significance test.
//!
//! Workers are logical partitions of one dataset. Every exchange between a
//! worker and the coordinator is an explicit value: column ranges, moment
//! sums, [`WorkerStats`], order-statistic counts and the partial sums of the
//! Newton iteration. Reductions always run in ascending worker order, so the
//! numbers do not depend on scheduling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{rescale_unit_interval, rescale_with, DataError, Dataset, UnitTransform};
use crate::elr::{
    decide, elr_statistic, estimating_equation, log_ratio, negligible_errors, noise_floor, score_diff_floored, solve_multiplier_by, DecisionMode, ElrError, ElrReport, ElrStatistic,
    ScoreRange, SolverOptions,
};
use crate::linalg::{add_outer, Cholesky, Matrix};
use crate::loocv::{LoocvResult, LEVERAGE_TOL};
use crate::model::{
    adjusted_ape, basis_specs_with, fit_model, response_floor, grid_points, nominal_kappa, select_from_fits, term_position, GridRow, ModelError,
    ModelFit, ModelSpec, PipelineConfig,
};
use crate::num::Scalar;
use crate::quantile::{interpolate, quantile_ranks};
use crate::spline::{knots_from_interior, AdditiveBasis, BasisSpec, SplineError};

/// Stream of the run seed used for the random partition.
const PARTITION_STREAM: u64 = 1;
/// Stream of the run seed used for order-statistic pivots.
const PIVOT_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("need at least one worker")]
    NoWorkers,
    #[error("{workers} workers for {n} rows would leave a shard empty")]
    TooManyWorkers { n: usize, workers: usize },
    #[error("order statistic rank {l} outside 1..={n}")]
    IndexOutOfRange { l: usize, n: usize },
    #[error("quantile level {0} outside [0, 1]")]
    Domain(f64),
    #[error("non-finite value in shard {0}")]
    NonFinite(usize),
    #[error("aggregated Gram matrix of the {0} model is singular")]
    SingularAggregate(&'static str),
    #[error("worker {worker}, row {row}: leverage {leverage} too close to 1")]
    DegenerateLeverage { worker: usize, row: usize, leverage: f64 },
    #[error("worker statistics disagree: {0}")]
    DimensionMismatch(String),
    #[error("worker id {0} appears more than once")]
    DuplicateWorker(usize),
    #[error("worker statistics envelope: {0}")]
    Envelope(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Elr(#[from] ElrError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Assignment of global row indices to workers.
///
/// Shard sizes differ by at most one; the first `n mod N` shards hold the
/// extra rows. All indices are zero-based: row `j` of worker `k` is global
/// row `global(j, k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMap {
    shards: Vec<Vec<usize>>,
    inverse: Vec<(usize, usize)>,
    seed: Option<u64>,
}

fn shard_sizes(n: usize, workers: usize) -> Result<Vec<usize>, DistError> {
    if workers == 0 {
        return Err(DistError::NoWorkers);
    }
    if workers > n {
        return Err(DistError::TooManyWorkers { n, workers });
    }
    let (m, extra) = (n / workers, n % workers);
    Ok((0..workers).map(|k| m + usize::from(k < extra)).collect())
}

impl PartitionMap {
    /// Consecutive blocks: `ν(j, k) = j + (k − 1) m` for equal shard sizes.
    pub fn sequential(n: usize, workers: usize) -> Result<Self, DistError> {
        Self::from_order((0..n).collect(), workers, None)
    }

    /// Random split driven by `seed`.
    pub fn random(n: usize, workers: usize, seed: u64) -> Result<Self, DistError> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, PARTITION_STREAM));
        Self::from_order(order, workers, Some(seed))
    }

    fn from_order(order: Vec<usize>, workers: usize, seed: Option<u64>) -> Result<Self, DistError> {
        let n = order.len();
        let sizes = shard_sizes(n, workers)?;
        let mut shards = Vec::with_capacity(workers);
        let mut inverse = vec![(0, 0); n];
        let mut at = 0;
        for (k, &m) in sizes.iter().enumerate() {
            let rows = order[at..at + m].to_vec();
            for (j, &i) in rows.iter().enumerate() {
                inverse[i] = (j, k);
            }
            shards.push(rows);
            at += m;
        }
        Ok(PartitionMap { shards, inverse, seed })
    }

    pub fn n(&self) -> usize {
        self.inverse.len()
    }

    pub fn workers(&self) -> usize {
        self.shards.len()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// Global rows held by worker `k`, in worker-local order.
    pub fn rows(&self, k: usize) -> &[usize] {
        &self.shards[k]
    }

    pub fn global(&self, j: usize, k: usize) -> usize {
        self.shards[k][j]
    }

    /// `(j, k)` holding global row `i`.
    pub fn locate(&self, i: usize) -> (usize, usize) {
        self.inverse[i]
    }

    /// Reassembles per-worker values into global row order.
    pub fn gather<T: Copy + Default>(&self, parts: &[Vec<T>]) -> Vec<T> {
        let mut out = vec![T::default(); self.n()];
        for (k, part) in parts.iter().enumerate() {
            for (j, &v) in part.iter().enumerate() {
                out[self.shards[k][j]] = v;
            }
        }
        out
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Rows held by one worker.
#[derive(Debug, Clone)]
pub struct Shard<T> {
    pub worker_id: usize,
    pub data: Dataset<T>,
}

pub fn make_shards<T: Scalar>(d: &Dataset<T>, map: &PartitionMap) -> Vec<Shard<T>> {
    (0..map.workers()).map(|k| Shard { worker_id: k, data: d.subset(map.rows(k)) }).collect()
}

/// Partitions `d` and rescales every shard with ranges taken over the union
/// of shards, which matches rescaling before partitioning.
pub fn partition<T: Scalar>(d: &Dataset<T>, workers: usize, seed: u64) -> Result<(PartitionMap, Vec<Shard<T>>), DistError> {
    let map = PartitionMap::random(d.n(), workers, seed)?;
    let shards = rescale_shards(&make_shards(d, &map))?;
    Ok((map, shards))
}

fn column_range<T: Scalar>(col: &[T]) -> (T, T) {
    col.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Min–max rescaling from per-worker column ranges.
pub fn rescale_shards<T: Scalar>(shards: &[Shard<T>]) -> Result<Vec<Shard<T>>, DistError> {
    let first = &shards.first().ok_or(DistError::NoWorkers)?.data;
    let ranges: Vec<(Vec<(T, T)>, Option<(T, T)>)> = shards
        .par_iter()
        .map(|s| (s.data.x.iter().map(|c| column_range(c)).collect(), s.data.z.as_deref().map(column_range)))
        .collect();
    let merge = |a: (T, T), b: (T, T)| (a.0.min(b.0), a.1.max(b.1));
    let to_transform = |name: &str, (min, max): (T, T)| {
        if max > min {
            Ok(UnitTransform { min, max })
        } else {
            Err(DataError::ConstantColumn(name.to_string()))
        }
    };
    let mut xt = Vec::with_capacity(first.p());
    for (j, name) in first.x_names.iter().enumerate() {
        let r = ranges.iter().map(|r| r.0[j]).reduce(merge).expect("at least one shard");
        xt.push(to_transform(name, r)?);
    }
    let zt = match &first.z_name {
        Some(name) => {
            let r = ranges.iter().filter_map(|r| r.1).reduce(merge).expect("at least one shard");
            Some(to_transform(name, r)?)
        }
        None => None,
    };
    Ok(shards.iter().map(|s| Shard { worker_id: s.worker_id, data: rescale_with(&s.data, &xt, zt) }).collect())
}

/// Rank-`l` order statistic (one-based) of the union of `shards`.
///
/// Each round draws a pivot uniformly from the remaining candidates, counts
/// candidates below and equal to it on every worker and either returns the
/// pivot or discards the side that cannot contain the answer. Counting ties
/// separately keeps the stopping rule well defined when values repeat.
pub fn distributed_order_statistic<T: Scalar>(shards: &[&[T]], l: usize, rng: &mut impl Rng) -> Result<T, DistError> {
    let n: usize = shards.iter().map(|s| s.len()).sum();
    if l == 0 || l > n {
        return Err(DistError::IndexOutOfRange { l, n });
    }
    for (k, s) in shards.iter().enumerate() {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(DistError::NonFinite(k));
        }
    }
    let mut sets: Vec<Vec<T>> = shards.iter().map(|s| s.to_vec()).collect();
    let mut l = l;
    loop {
        let total: usize = sets.iter().map(Vec::len).sum();
        let mut pick = rng.random_range(0..total);
        let pivot = sets
            .iter()
            .find_map(|s| {
                if pick < s.len() {
                    Some(s[pick])
                } else {
                    pick -= s.len();
                    None
                }
            })
            .expect("pick within total");
        let counts: Vec<(usize, usize)> = sets
            .par_iter()
            .map(|s| s.iter().fold((0, 0), |(lt, eq), &v| (lt + usize::from(v < pivot), eq + usize::from(v == pivot))))
            .collect();
        let below: usize = counts.iter().map(|c| c.0).sum();
        let equal: usize = counts.iter().map(|c| c.1).sum();
        if below < l && l <= below + equal {
            return Ok(pivot);
        }
        if l <= below {
            sets.par_iter_mut().for_each(|s| s.retain(|&v| v < pivot));
        } else {
            sets.par_iter_mut().for_each(|s| s.retain(|&v| v > pivot));
            l -= below + equal;
        }
    }
}

/// Sample quantile `x_(⌊h⌋) + (h − ⌊h⌋)(x_(⌈h⌉) − x_(⌊h⌋))`, `h = (n − 1) q + 1`,
/// of the union of `shards`, equal bit for bit to the single-machine value.
pub fn distributed_quantile<T: Scalar>(shards: &[&[T]], q: T, seed: u64) -> Result<T, DistError> {
    if !(q >= T::zero() && q <= T::one()) {
        return Err(DistError::Domain(q.as_f64()));
    }
    let n: usize = shards.iter().map(|s| s.len()).sum();
    if n == 0 {
        return Err(DistError::IndexOutOfRange { l: 1, n: 0 });
    }
    let mut rng = stream_rng(seed, PIVOT_STREAM);
    let (lo, hi, w) = quantile_ranks(n, q);
    let x_lo = distributed_order_statistic(shards, lo, &mut rng)?;
    let x_hi = if hi == lo { x_lo } else { distributed_order_statistic(shards, hi, &mut rng)? };
    Ok(interpolate(x_lo, x_hi, w))
}

/// Quantile knots for column `name`, computed across shards.
pub fn distributed_quantile_knots<T: Scalar>(
    shards: &[Shard<T>],
    name: &str,
    q: usize,
    seed: u64,
) -> Result<Vec<T>, DistError> {
    let cols: Vec<&[T]> = shards
        .iter()
        .map(|s| s.data.column(name).ok_or_else(|| ModelError::UnknownColumn(name.to_string())))
        .collect::<Result<_, _>>()?;
    let n: usize = cols.iter().map(|c| c.len()).sum();
    if n < 2 {
        return Err(SplineError::TooFewSamples.into());
    }
    let interior = (1..=q)
        .map(|k| distributed_quantile(&cols, T::of_usize(k) / T::of_usize(q + 1), seed))
        .collect::<Result<Vec<T>, _>>()?;
    Ok(knots_from_interior(&interior)?)
}

/// Per-worker sums needed to center the design and the response.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardMoments<T> {
    pub worker_id: usize,
    pub rows: usize,
    pub y_sum: T,
    /// Column sums of the uncentered full basis.
    pub column_sums: Vec<T>,
}

/// Global centering derived from all workers' moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Centering<T> {
    pub n: usize,
    pub y_bar: T,
    pub means: Vec<T>,
}

fn component_columns<'a, T: Scalar>(d: &'a Dataset<T>, columns: &[String]) -> Vec<&'a [T]> {
    columns.iter().map(|c| d.column(c).expect("resolved column")).collect()
}

pub fn shard_moments<T: Scalar>(shard: &Shard<T>, columns: &[String], basis: &AdditiveBasis<T>) -> Result<ShardMoments<T>, DistError> {
    let cols = component_columns(&shard.data, columns);
    let raw = basis.raw_matrix(&cols)?;
    let column_sums = (0..raw.ncols()).map(|j| raw.column(j).into_iter().sum()).collect();
    Ok(ShardMoments {
        worker_id: shard.worker_id,
        rows: shard.data.n(),
        y_sum: shard.data.y.iter().copied().sum(),
        column_sums,
    })
}

pub fn combine_moments<T: Scalar>(moments: &[ShardMoments<T>]) -> Centering<T> {
    let mut sorted: Vec<&ShardMoments<T>> = moments.iter().collect();
    sorted.sort_by_key(|m| m.worker_id);
    let n: usize = sorted.iter().map(|m| m.rows).sum();
    let k = sorted.first().map_or(0, |m| m.column_sums.len());
    let mut sums = vec![T::zero(); k];
    let mut y_sum = T::zero();
    for m in sorted {
        y_sum = y_sum + m.y_sum;
        for (s, &v) in sums.iter_mut().zip(&m.column_sums) {
            *s = *s + v;
        }
    }
    let nt = T::of_usize(n);
    Centering { n, y_bar: y_sum / nt, means: sums.into_iter().map(|s| s / nt).collect() }
}

/// Gram matrix and moment vector of one worker's rows for the full model and,
/// optionally, the model without one component.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerStats<T> {
    pub worker_id: usize,
    pub rows: usize,
    pub a_full: Matrix<T>,
    pub b_full: Vec<T>,
    pub a_drop: Option<Matrix<T>>,
    pub b_drop: Option<Vec<T>>,
}

/// Centered additive bases for the full model and the model without `drop`.
#[derive(Debug, Clone)]
pub struct SharedBasis<T> {
    pub columns: Vec<String>,
    pub full: AdditiveBasis<T>,
    pub drop: Option<(usize, AdditiveBasis<T>)>,
    pub y_bar: T,
}

impl<T: Scalar> SharedBasis<T> {
    /// Round trip over the workers: moment sums, then centered bases.
    pub fn build(shards: &[Shard<T>], columns: Vec<String>, specs: &[BasisSpec<T>], drop: Option<usize>) -> Result<Self, DistError> {
        let raw = AdditiveBasis::new(specs.to_vec(), None)?;
        let moments = shards.par_iter().map(|s| shard_moments(s, &columns, &raw)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_centering(columns, specs, drop, &combine_moments(&moments))?)
    }

    pub fn from_centering(
        columns: Vec<String>,
        specs: &[BasisSpec<T>],
        drop: Option<usize>,
        c: &Centering<T>,
    ) -> Result<Self, SplineError> {
        let full = AdditiveBasis::new(specs.to_vec(), None)?;
        let drop_basis = match drop {
            Some(l) => {
                let reduced = AdditiveBasis::new(specs.to_vec(), Some(l))?;
                // the reduced basis keeps the full basis' columns outside component ℓ
                let means: Vec<T> =
                    full.column_map().iter().zip(&c.means).filter(|&(&j, _)| j != l).map(|(_, &m)| m).collect();
                Some((l, reduced.with_means(means)))
            }
            None => None,
        };
        Ok(SharedBasis { columns, full: full.with_means(c.means.clone()), drop: drop_basis, y_bar: c.y_bar })
    }

    fn rows(&self, shard: &Shard<T>, basis: &AdditiveBasis<T>) -> Result<Matrix<T>, SplineError> {
        let cols = component_columns(&shard.data, &self.columns);
        let mut m = Matrix::zeros(shard.data.n(), basis.ncols());
        let mut vals = vec![T::zero(); cols.len()];
        for i in 0..shard.data.n() {
            for (v, c) in vals.iter_mut().zip(&cols) {
                *v = c[i];
            }
            basis.row_into(&vals, m.row_mut(i))?;
        }
        Ok(m)
    }
}

fn gram_and_moment<T: Scalar>(rows: &Matrix<T>, y: &[T]) -> (Matrix<T>, Vec<T>) {
    let k = rows.ncols();
    let mut a = Matrix::zeros(k, k);
    let mut b = vec![T::zero(); k];
    for (i, &yi) in y.iter().enumerate() {
        let r = rows.row(i);
        add_outer(&mut a, r);
        for (bj, &rj) in b.iter_mut().zip(r) {
            *bj = *bj + rj * yi;
        }
    }
    (a, b)
}

pub fn worker_stats<T: Scalar>(shard: &Shard<T>, basis: &SharedBasis<T>) -> Result<WorkerStats<T>, DistError> {
    let y: Vec<T> = shard.data.y.iter().map(|&v| v - basis.y_bar).collect();
    let (a_full, b_full) = gram_and_moment(&basis.rows(shard, &basis.full)?, &y);
    let (a_drop, b_drop) = match &basis.drop {
        Some((_, b)) => {
            let (a, v) = gram_and_moment(&basis.rows(shard, b)?, &y);
            (Some(a), Some(v))
        }
        None => (None, None),
    };
    Ok(WorkerStats { worker_id: shard.worker_id, rows: shard.data.n(), a_full, b_full, a_drop, b_drop })
}

/// Sums of all workers' statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate<T> {
    pub rows: usize,
    pub workers: Vec<usize>,
    pub a_full: Matrix<T>,
    pub b_full: Vec<T>,
    pub a_drop: Option<Matrix<T>>,
    pub b_drop: Option<Vec<T>>,
}

/// Adds worker statistics in ascending `worker_id` order.
pub fn aggregate<T: Scalar>(stats: &[WorkerStats<T>]) -> Result<Aggregate<T>, DistError> {
    let mut sorted: Vec<&WorkerStats<T>> = stats.iter().collect();
    sorted.sort_by_key(|s| s.worker_id);
    let first = *sorted.first().ok_or(DistError::NoWorkers)?;
    let (kf, kd) = (first.b_full.len(), first.b_drop.as_ref().map(Vec::len));
    for w in sorted.windows(2) {
        if w[0].worker_id == w[1].worker_id {
            return Err(DistError::DuplicateWorker(w[0].worker_id));
        }
    }
    let mut agg = Aggregate {
        rows: 0,
        workers: sorted.iter().map(|s| s.worker_id).collect(),
        a_full: Matrix::zeros(kf, kf),
        b_full: vec![T::zero(); kf],
        a_drop: kd.map(|k| Matrix::zeros(k, k)),
        b_drop: kd.map(|k| vec![T::zero(); k]),
    };
    for s in sorted {
        let dims_ok = s.a_full.nrows() == kf
            && s.a_full.ncols() == kf
            && s.b_full.len() == kf
            && s.b_drop.as_ref().map(Vec::len) == kd
            && s.a_drop.as_ref().map(|a| (a.nrows(), a.ncols())) == kd.map(|k| (k, k));
        if !dims_ok {
            return Err(DistError::DimensionMismatch(format!("worker {} does not match worker {}", s.worker_id, first.worker_id)));
        }
        agg.rows += s.rows;
        agg.a_full.add_assign(&s.a_full);
        add_vec(&mut agg.b_full, &s.b_full);
        if let (Some(a), Some(sa)) = (agg.a_drop.as_mut(), s.a_drop.as_ref()) {
            a.add_assign(sa);
        }
        if let (Some(b), Some(sb)) = (agg.b_drop.as_mut(), s.b_drop.as_ref()) {
            add_vec(b, sb);
        }
    }
    Ok(agg)
}

fn add_vec<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

fn cholesky_tol<T: Scalar>() -> T {
    T::epsilon() * T::of(1e4)
}

/// Coefficients and factor of one aggregated model, broadcast to the workers.
#[derive(Debug, Clone)]
pub struct GlobalFit<T> {
    pub chol: Cholesky<T>,
    pub coefficients: Vec<T>,
}

impl<T: Scalar> GlobalFit<T> {
    pub fn solve(a: &Matrix<T>, b: &[T], which: &'static str) -> Result<Self, DistError> {
        let chol = Cholesky::factor(a, cholesky_tol()).map_err(|_| DistError::SingularAggregate(which))?;
        let coefficients = chol.solve(b);
        Ok(GlobalFit { chol, coefficients })
    }
}

/// Leave-one-out errors `eⱼ / (1 − pⱼ)` of one worker's rows, with
/// `pⱼ = Πⱼᵀ 𝒜⁻¹ Πⱼ`; returns `(errors, residuals, leverages)`.
fn worker_loo<T: Scalar>(
    shard: &Shard<T>,
    basis: &SharedBasis<T>,
    model: &AdditiveBasis<T>,
    fit: &GlobalFit<T>,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), DistError> {
    let rows = basis.rows(shard, model)?;
    let m = shard.data.n();
    let (mut errors, mut residuals, mut leverages) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    for j in 0..m {
        let r = rows.row(j);
        let e = shard.data.y[j] - basis.y_bar - r.iter().zip(&fit.coefficients).map(|(&a, &b)| a * b).sum::<T>();
        let p = fit.chol.inv_quad(r);
        if !(p < T::one() - T::of(LEVERAGE_TOL)) {
            return Err(DistError::DegenerateLeverage { worker: shard.worker_id, row: j, leverage: p.as_f64() });
        }
        errors.push(e / (T::one() - p));
        residuals.push(e);
        leverages.push(p);
    }
    Ok((errors, residuals, leverages))
}

/// Per-worker leave-one-out errors of the full and reduced models.
#[derive(Debug, Clone)]
pub struct WorkerErrors<T> {
    pub full: Vec<Vec<T>>,
    pub drop: Vec<Vec<T>>,
    /// Both models fit every row to rounding accuracy; scores are zero.
    pub negligible: bool,
}

impl<T: Scalar> WorkerErrors<T> {
    /// `η̂ = ε̂²_reduced − ε̂²_full` per worker.
    pub fn scores(&self) -> Vec<Vec<T>> {
        self.full
            .iter()
            .zip(&self.drop)
            .map(|(f, d)| {
                if self.negligible {
                    vec![T::zero(); f.len()]
                } else {
                    f.iter().zip(d).map(|(&a, &b)| b * b - a * a).collect()
                }
            })
            .collect()
    }
}

fn sum_squares<T: Scalar>(parts: &[Vec<T>]) -> T {
    parts.iter().map(|p| p.iter().map(|&e| e * e).sum::<T>()).fold(T::zero(), |a, b| a + b)
}

/// Workers' leave-one-out errors for both models from the aggregated fits.
pub fn distributed_scores<T: Scalar>(
    shards: &[Shard<T>],
    basis: &SharedBasis<T>,
    agg: &Aggregate<T>,
) -> Result<WorkerErrors<T>, DistError> {
    let full_fit = GlobalFit::solve(&agg.a_full, &agg.b_full, "full")?;
    let (_, drop_basis) = basis.drop.as_ref().ok_or_else(|| DistError::DimensionMismatch("no reduced model".into()))?;
    let (a, b) = agg.a_drop.as_ref().zip(agg.b_drop.as_ref()).ok_or_else(|| DistError::DimensionMismatch("no reduced statistics".into()))?;
    let drop_fit = GlobalFit::solve(a, b, "reduced")?;
    let parts = shards
        .par_iter()
        .map(|s| {
            let full = worker_loo(s, basis, &basis.full, &full_fit)?.0;
            let drop = worker_loo(s, basis, drop_basis, &drop_fit)?.0;
            Ok((full, drop))
        })
        .collect::<Result<Vec<_>, DistError>>()?;
    let (full, drop) = parts.into_iter().unzip();
    Ok(WorkerErrors { full, drop, negligible: false })
}

/// ELR statistic of per-worker scores. Each Newton step gathers
/// `D₁ₖ = Σⱼ η̂ⱼ/(1+τη̂ⱼ)` and `D₂ₖ = Σⱼ η̂ⱼ²/(1+τη̂ⱼ)²` from every worker.
pub fn distributed_elr<T: Scalar>(scores: &[Vec<T>], dape: T, opts: &SolverOptions) -> Result<ElrStatistic<T>, DistError> {
    let n: usize = scores.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(ElrError::Empty.into());
    }
    for (k, s) in scores.iter().enumerate() {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(DistError::NonFinite(k));
        }
    }
    let empty = ScoreRange { min: T::infinity(), max: T::neg_infinity(), abs_sum: T::zero() };
    let range = scores.par_iter().map(|s| ScoreRange::of(s)).collect::<Vec<_>>().into_iter().fold(empty, ScoreRange::merge);
    let eval = |tau: T| {
        let parts: Vec<Option<(T, T)>> = scores.par_iter().map(|s| estimating_equation(s, tau)).collect();
        parts.into_iter().try_fold((T::zero(), T::zero()), |(d1, d2), p| p.map(|(a, b)| (d1 + a, d2 + b)))
    };
    let m = solve_multiplier_by(range, eval, opts)?;
    Ok(ElrStatistic::from_multiplier(m, dape, n, |tau| {
        let parts: Vec<T> = scores.par_iter().map(|s| log_ratio(s, tau)).collect();
        parts.into_iter().fold(T::zero(), |a, b| a + b)
    }))
}

/// Settings specific to the sharded run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistributedConfig {
    pub workers: usize,
    pub seed: u64,
}

/// Outcome of the sharded variable test.
#[derive(Debug, Clone)]
pub struct DistributedTest<T> {
    pub spec: ModelSpec,
    pub column: String,
    pub drop: usize,
    pub partition: PartitionMap,
    pub table: Vec<GridRow>,
    pub q: Vec<usize>,
    pub specs: Vec<BasisSpec<T>>,
    pub kappa_full: usize,
    pub kappa_drop: usize,
    pub ape_full: T,
    pub ape_drop: T,
    pub stats: Vec<WorkerStats<T>>,
    /// `η̂` per worker.
    pub scores: Vec<Vec<T>>,
    pub report: ElrReport<T>,
}

impl<T: Scalar> DistributedTest<T> {
    /// Scores in the original row order.
    pub fn global_scores(&self) -> Vec<T> {
        self.partition.gather(&self.scores)
    }
}

fn additive_columns<T: Scalar>(spec: &ModelSpec, d: &Dataset<T>) -> Result<(ModelSpec, Vec<String>), DistError> {
    match spec.resolved(d)? {
        ModelSpec::Additive { terms } => {
            let cols = terms.iter().map(|t| t.column.clone()).collect();
            Ok((ModelSpec::Additive { terms }, cols))
        }
        ModelSpec::VaryingCoefficient { .. } => Err(ModelError::NotNestable.into()),
    }
}

/// Full-model fit on sharded data for one grid point, reported in the same
/// shape as the single-machine fit.
fn distributed_fit<T: Scalar>(
    shards: &[Shard<T>],
    spec: &ModelSpec,
    columns: &[String],
    specs: Vec<BasisSpec<T>>,
    q: Vec<usize>,
) -> Result<ModelFit<T>, DistError> {
    let basis = SharedBasis::build(shards, columns.to_vec(), &specs, None)?;
    let stats = shards.par_iter().map(|s| worker_stats(s, &basis)).collect::<Result<Vec<_>, _>>()?;
    let agg = aggregate(&stats)?;
    let fit = GlobalFit::solve(&agg.a_full, &agg.b_full, "full")?;
    let parts = shards.par_iter().map(|s| worker_loo(s, &basis, &basis.full, &fit)).collect::<Result<Vec<_>, _>>()?;
    let mut loocv = LoocvResult { leverages: Vec::new(), residuals: Vec::new(), errors: Vec::new(), ape: T::zero(), kappa: basis.full.ncols() };
    for (e, r, p) in parts {
        loocv.errors.extend(e);
        loocv.residuals.extend(r);
        loocv.leverages.extend(p);
    }
    loocv.ape = loocv.errors.iter().map(|&e| e * e).sum::<T>() / T::of_usize(agg.rows);
    let kappa = nominal_kappa(&specs, None);
    let ape_adj = adjusted_ape(&loocv.errors, kappa)?;
    Ok(ModelFit { spec: spec.clone(), specs, q, drop: None, kappa, loocv, ape_adj })
}

/// Chooses knot counts for the full additive model on sharded data; quantile
/// knots come from the distributed quantile algorithm.
pub fn distributed_select<T: Scalar>(
    shards: &[Shard<T>],
    spec: &ModelSpec,
    cfg: &PipelineConfig<T>,
    seed: u64,
) -> Result<(Vec<GridRow>, ModelFit<T>), DistError> {
    let first = &shards.first().ok_or(DistError::NoWorkers)?.data;
    let (spec, columns) = additive_columns(spec, first)?;
    // the default grid depends on the total row count, not a shard's
    let n: usize = shards.iter().map(|s| s.data.n()).sum();
    let mut knots = cfg.knots.clone();
    if knots.grid.is_none() {
        knots.grid = Some(crate::model::QGrid::Shared(crate::model::default_q_grid(n)));
    }
    let points = grid_points(&spec, first, &knots)?;
    let fits: Vec<Result<ModelFit<T>, ModelError>> = points
        .iter()
        .map(|q| {
            let specs = basis_specs_with(&spec, first, q, &knots, |col, qj| {
                distributed_quantile_knots(shards, col, qj, seed).map_err(|e| match e {
                    DistError::Spline(s) => s,
                    other => SplineError::InvalidKnots(other.to_string()),
                })
            })?;
            distributed_fit(shards, &spec, &columns, specs, q.clone()).map_err(into_model_error)
        })
        .collect();
    let sel = select_from_fits(points, fits)?;
    Ok((sel.table, sel.best))
}

fn into_model_error(e: DistError) -> ModelError {
    match e {
        DistError::Model(m) => m,
        DistError::Spline(s) => ModelError::Spline(s),
        other => ModelError::AllGridPointsFailed(other.to_string()),
    }
}

/// Variable test on shards with fixed basis specs.
pub fn distributed_test_with_specs<T: Scalar>(
    shards: &[Shard<T>],
    columns: Vec<String>,
    specs: &[BasisSpec<T>],
    drop: usize,
    cfg: &PipelineConfig<T>,
) -> Result<(Vec<WorkerStats<T>>, WorkerErrors<T>, ElrReport<T>), DistError> {
    let basis = SharedBasis::build(shards, columns, specs, Some(drop))?;
    let stats = shards.par_iter().map(|s| worker_stats(s, &basis)).collect::<Result<Vec<_>, _>>()?;
    let (errors, report) = finish_from_stats(shards, &basis, &stats, cfg)?;
    Ok((stats, errors, report))
}

/// Aggregation, score and Newton rounds from already computed statistics.
pub fn finish_from_stats<T: Scalar>(
    shards: &[Shard<T>],
    basis: &SharedBasis<T>,
    stats: &[WorkerStats<T>],
    cfg: &PipelineConfig<T>,
) -> Result<(WorkerErrors<T>, ElrReport<T>), DistError> {
    let agg = aggregate(stats)?;
    let mut errors = distributed_scores(shards, basis, &agg)?;
    let nt = T::of_usize(agg.rows);
    // one scalar per worker: Σ (yᵢ − ȳ)²
    let ss_y: T = shards
        .par_iter()
        .map(|s| s.data.y.iter().map(|&y| (y - basis.y_bar) * (y - basis.y_bar)).sum::<T>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    let floor = noise_floor(ss_y, agg.rows);
    errors.negligible = errors.full.iter().zip(&errors.drop).all(|(f, d)| negligible_errors(f, d, floor));
    let dape = if errors.negligible { T::zero() } else { (sum_squares(&errors.drop) - sum_squares(&errors.full)) / nt };
    let stat = distributed_elr(&errors.scores(), dape, &cfg.solver)?;
    let report = decide(&stat, cfg.alpha, DecisionMode::VariableSignificance)?;
    Ok((errors, report))
}

/// Tests `m_ℓ = 0` for the additive term on `column` with `workers` shards.
/// `d` holds raw covariates; rescaling happens on the shards.
pub fn distributed_test_variable<T: Scalar>(
    d: &Dataset<T>,
    spec: &ModelSpec,
    column: &str,
    cfg: &PipelineConfig<T>,
    dcfg: &DistributedConfig,
) -> Result<DistributedTest<T>, DistError> {
    let (map, shards) = partition(d, dcfg.workers, dcfg.seed)?;
    let (table, best) = distributed_select(&shards, spec, cfg, dcfg.seed)?;
    let (spec, columns) = additive_columns(spec, &shards[0].data)?;
    let drop = term_position(&spec, &shards[0].data, column)?;
    let (stats, errors, report) = distributed_test_with_specs(&shards, columns, &best.specs, drop, cfg)?;
    let nt = T::of_usize(d.n());
    Ok(DistributedTest {
        column: column.to_string(),
        drop,
        partition: map,
        table,
        q: best.q.clone(),
        kappa_full: nominal_kappa(&best.specs, None),
        kappa_drop: nominal_kappa(&best.specs, Some(drop)),
        ape_full: sum_squares(&errors.full) / nt,
        ape_drop: sum_squares(&errors.drop) / nt,
        specs: best.specs,
        stats,
        scores: errors.scores(),
        report,
        spec,
    })
}

/// Re-runs a finished sharded test on the pooled data through the
/// single-machine fitting path with the same knots and reports whether the
/// scores, statistic and decision agree.
pub fn verify_single_worker<T: Scalar>(
    d: &Dataset<T>,
    t: &DistributedTest<T>,
    cfg: &PipelineConfig<T>,
) -> Result<ShadowCheck, DistError> {
    let pooled = rescale_unit_interval(d)?;
    let full = fit_model(&t.spec, &pooled, t.specs.clone(), t.q.clone(), None, &cfg.fit)?;
    let reduced = fit_model(&t.spec, &pooled, t.specs.clone(), t.q.clone(), Some(t.drop), &cfg.fit)?;
    let scores = score_diff_floored(&reduced.loocv, &full.loocv, response_floor(&pooled))?;
    let shadow = decide(&elr_statistic(&scores, &cfg.solver)?, cfg.alpha, DecisionMode::VariableSignificance)?;
    let (a, b) = (t.report.statistic.as_f64(), shadow.statistic.as_f64());
    let tol = 1e-8 * a.abs().max(1.0);
    let same_stat = (a.is_infinite() && b.is_infinite()) || (a - b).abs() <= tol;
    let sharded = t.global_scores();
    let scale = 1.0 + scores.scores.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    let score_difference = sharded.iter().zip(scores.scores).fold(0.0f64, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()));
    Ok(ShadowCheck {
        statistic: b,
        difference: if a == b { 0.0 } else { (a - b).abs() },
        score_difference,
        matches: same_stat && score_difference <= 1e-8 * scale && t.report.decision == shadow.decision,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShadowCheck {
    pub statistic: f64,
    pub difference: f64,
    pub score_difference: f64,
    pub matches: bool,
}

/// Identifies the envelope format.
pub const ENVELOPE_FORMAT: &str = "elr-worker-stats";
pub const ENVELOPE_VERSION: u32 = 1;

/// Serialized [`WorkerStats`] plus the shared settings that produced them.
/// Matrices are row-major; floats use the shortest representation that
/// parses back to the same bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsEnvelope {
    pub format: String,
    pub version: u32,
    pub worker_id: usize,
    pub rows: usize,
    pub columns: Vec<String>,
    pub drop: Option<usize>,
    pub order: Vec<usize>,
    pub knots: Vec<Vec<f64>>,
    pub y_bar: f64,
    pub column_means: Vec<f64>,
    pub k_full: usize,
    pub a_full: Vec<f64>,
    pub b_full: Vec<f64>,
    pub k_drop: Option<usize>,
    pub a_drop: Option<Vec<f64>>,
    pub b_drop: Option<Vec<f64>>,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

impl StatsEnvelope {
    pub fn new<T: Scalar>(s: &WorkerStats<T>, basis: &SharedBasis<T>) -> Self {
        StatsEnvelope {
            format: ENVELOPE_FORMAT.into(),
            version: ENVELOPE_VERSION,
            worker_id: s.worker_id,
            rows: s.rows,
            columns: basis.columns.clone(),
            drop: basis.drop.as_ref().map(|(l, _)| *l),
            order: basis.full.specs().iter().map(BasisSpec::order).collect(),
            knots: basis.full.specs().iter().map(|sp| to_f64(sp.knots())).collect(),
            y_bar: basis.y_bar.as_f64(),
            column_means: to_f64(basis.full.means()),
            k_full: s.b_full.len(),
            a_full: to_f64(s.a_full.as_slice()),
            b_full: to_f64(&s.b_full),
            k_drop: s.b_drop.as_ref().map(Vec::len),
            a_drop: s.a_drop.as_ref().map(|a| to_f64(a.as_slice())),
            b_drop: s.b_drop.as_ref().map(|b| to_f64(b)),
        }
    }

    pub fn to_json(&self) -> Result<String, DistError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DistError> {
        let env: StatsEnvelope = serde_json::from_str(text)?;
        if env.format != ENVELOPE_FORMAT {
            return Err(DistError::Envelope(format!("unexpected format {:?}", env.format)));
        }
        if env.version != ENVELOPE_VERSION {
            return Err(DistError::Envelope(format!("unsupported version {}", env.version)));
        }
        let k = env.k_full;
        if env.a_full.len() != k * k || env.b_full.len() != k {
            return Err(DistError::Envelope("full-model dimensions do not match".into()));
        }
        match (env.k_drop, &env.a_drop, &env.b_drop) {
            (None, None, None) => {}
            (Some(kd), Some(a), Some(b)) if a.len() == kd * kd && b.len() == kd => {}
            _ => return Err(DistError::Envelope("reduced-model dimensions do not match".into())),
        }
        Ok(env)
    }

    pub fn stats<T: Scalar>(&self) -> WorkerStats<T> {
        let k = self.k_full;
        WorkerStats {
            worker_id: self.worker_id,
            rows: self.rows,
            a_full: Matrix::from_row_major(k, k, from_f64(&self.a_full)),
            b_full: from_f64(&self.b_full),
            a_drop: self.a_drop.as_ref().zip(self.k_drop).map(|(a, kd)| Matrix::from_row_major(kd, kd, from_f64(a))),
            b_drop: self.b_drop.as_ref().map(|b| from_f64(b)),
        }
    }

    /// Rebuilds the shared bases the statistics were computed with.
    pub fn basis<T: Scalar>(&self) -> Result<SharedBasis<T>, DistError> {
        let specs = self
            .order
            .iter()
            .zip(&self.knots)
            .map(|(&o, k)| BasisSpec::new(o, from_f64(k)))
            .collect::<Result<Vec<_>, _>>()?;
        let c = Centering { n: 0, y_bar: T::of(self.y_bar), means: from_f64(&self.column_means) };
        if c.means.len() != AdditiveBasis::new(specs.clone(), None)?.ncols() {
            return Err(DistError::Envelope("column means do not match the knots".into()));
        }
        Ok(SharedBasis::from_centering(self.columns.clone(), &specs, self.drop, &c)?)
    }
}
