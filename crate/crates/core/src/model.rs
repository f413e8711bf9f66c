//! Model specifications, knot-count selection and the end-to-end comparison
//! and variable-significance pipelines on a single machine.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{center_response, DataError, Dataset};
use crate::elr::{decide, elr_statistic, noise_floor, score_diff_floored, DecisionMode, ElrError, ElrReport, ScoreVector, SolverOptions};
use crate::loocv::{loocv_fast, FitOptions, LoocvError, LoocvResult};
use crate::num::Scalar;
use crate::spline::{
    additive_from_columns, quantile_knots, uniform_knots, varycoef_from_columns, BasisSpec, DesignMatrix, SplineError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("invalid model specification {spec:?}: {reason}")]
    Parse { spec: String, reason: String },
    #[error("varying-coefficient model needs an index variable")]
    MissingIndexVariable,
    #[error("empty knot grid")]
    EmptyGrid,
    #[error("per-component grid has {got} components, model has {expected}")]
    GridShape { expected: usize, got: usize },
    #[error("no knot grid point could be fitted ({0})")]
    AllGridPointsFailed(String),
    #[error("{0:?} is not a term of the model")]
    NotATerm(String),
    #[error("variable test needs an additive model with at least two terms")]
    NotNestable,
    #[error("{kappa} basis functions leave no residual degrees of freedom for n = {n}")]
    TooManyBasisFunctions { kappa: usize, n: usize },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Loocv(#[from] LoocvError),
    #[error(transparent)]
    Elr(#[from] ElrError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    Smooth,
    /// Enters linearly; fitted as an order-2 spline without interior knots.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term {
    pub column: String,
    pub kind: TermKind,
}

impl Term {
    pub fn smooth(column: impl Into<String>) -> Self {
        Term { column: column.into(), kind: TermKind::Smooth }
    }

    pub fn linear(column: impl Into<String>) -> Self {
        Term { column: column.into(), kind: TermKind::Linear }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TermKind::Smooth => f.write_str(&self.column),
            TermKind::Linear => write!(f, "lin({})", self.column),
        }
    }
}

/// A regression model over named dataset columns.
///
/// Text form: `additive`, `additive:x1,lin(x2),z`, `varycoef`,
/// `varycoef:x1,x2`. Without a column list the model uses every covariate
/// (not the index variable).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ModelSpec {
    /// `E(y − ȳ) = Σ m_j(x_j)` with centered components.
    Additive { terms: Vec<Term> },
    /// `E(y) = β₀(z) + Σ x_j β_j(z)`.
    VaryingCoefficient { covariates: Vec<String> },
}

impl ModelSpec {
    pub fn additive<S: Into<String>>(cols: impl IntoIterator<Item = S>) -> Self {
        ModelSpec::Additive { terms: cols.into_iter().map(Term::smooth).collect() }
    }

    pub fn varycoef<S: Into<String>>(cols: impl IntoIterator<Item = S>) -> Self {
        ModelSpec::VaryingCoefficient { covariates: cols.into_iter().map(Into::into).collect() }
    }

    pub fn is_additive(&self) -> bool {
        matches!(self, ModelSpec::Additive { .. })
    }

    /// Explicit terms, expanding an empty list to every covariate of `d`.
    pub fn resolved<T: Scalar>(&self, d: &Dataset<T>) -> Result<ModelSpec, ModelError> {
        let all = || d.x_names.clone();
        let check = |c: &str| d.column(c).map(|_| ()).ok_or_else(|| ModelError::UnknownColumn(c.to_string()));
        Ok(match self {
            ModelSpec::Additive { terms } => {
                let terms = if terms.is_empty() { all().into_iter().map(Term::smooth).collect() } else { terms.clone() };
                for t in &terms {
                    check(&t.column)?;
                }
                ModelSpec::Additive { terms }
            }
            ModelSpec::VaryingCoefficient { covariates } => {
                if d.z.is_none() {
                    return Err(ModelError::MissingIndexVariable);
                }
                let covariates = if covariates.is_empty() { all() } else { covariates.clone() };
                for c in &covariates {
                    check(c)?;
                }
                ModelSpec::VaryingCoefficient { covariates }
            }
        })
    }

    /// Components in design order, each with the column its knots are placed on.
    fn components<T: Scalar>(&self, d: &Dataset<T>) -> Result<Vec<Component>, ModelError> {
        match self.resolved(d)? {
            ModelSpec::Additive { terms } => Ok(terms
                .into_iter()
                .map(|t| Component { knot_column: t.column, kind: t.kind })
                .collect()),
            ModelSpec::VaryingCoefficient { covariates } => {
                let z = d.z_name.clone().ok_or(ModelError::MissingIndexVariable)?;
                // intercept function plus one coefficient function per covariate
                let n = covariates.len() + 1;
                Ok((0..n).map(|_| Component { knot_column: z.clone(), kind: TermKind::Smooth }).collect())
            }
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (head, items): (&str, Vec<String>) = match self {
            ModelSpec::Additive { terms } => ("additive", terms.iter().map(Term::to_string).collect()),
            ModelSpec::VaryingCoefficient { covariates } => ("varycoef", covariates.clone()),
        };
        if items.is_empty() {
            f.write_str(head)
        } else {
            write!(f, "{head}:{}", items.join(","))
        }
    }
}

impl FromStr for ModelSpec {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason: &str| ModelError::Parse { spec: s.to_string(), reason: reason.to_string() };
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h.trim(), Some(r)),
            None => (s.trim(), None),
        };
        let items: Vec<&str> = match rest {
            Some(r) => r.split(',').map(str::trim).collect(),
            None => Vec::new(),
        };
        if items.iter().any(|i| i.is_empty()) {
            return Err(err("empty term"));
        }
        match head {
            "additive" | "add" => {
                let terms = items
                    .iter()
                    .map(|item| match item.strip_prefix("lin(").and_then(|r| r.strip_suffix(')')) {
                        Some(c) if !c.trim().is_empty() => Ok(Term::linear(c.trim())),
                        Some(_) => Err(err("empty lin() term")),
                        None if item.contains('(') || item.contains(')') => Err(err("unknown term function")),
                        None => Ok(Term::smooth(*item)),
                    })
                    .collect::<Result<_, _>>()?;
                Ok(ModelSpec::Additive { terms })
            }
            "varycoef" | "vc" | "varying" => {
                if items.iter().any(|i| i.contains('(')) {
                    return Err(err("varying-coefficient terms are plain column names"));
                }
                Ok(ModelSpec::varycoef(items.iter().copied()))
            }
            _ => Err(err("expected additive[:terms] or varycoef[:columns]")),
        }
    }
}

struct Component {
    knot_column: String,
    kind: TermKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    Quantile,
    Uniform,
}

impl FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quantile" => Ok(Placement::Quantile),
            "uniform" => Ok(Placement::Uniform),
            _ => Err(format!("unknown knot placement {s:?} (expected quantile or uniform)")),
        }
    }
}

/// Candidate interior-knot counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QGrid {
    /// Every smooth component uses the same count.
    Shared(Vec<usize>),
    /// Cartesian product of per-component candidates, one list per component
    /// in design order (linear terms are ignored but must be listed).
    PerComponent(Vec<Vec<usize>>),
}

/// `1..=⌈n^{1/5}⌉ + 2`.
pub fn default_q_grid(n: usize) -> Vec<usize> {
    let top = (n as f64).powf(0.2).ceil() as usize + 2;
    (1..=top).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnotConfig {
    pub order: usize,
    pub placement: Placement,
    /// `None` selects [`default_q_grid`] for the sample size.
    pub grid: Option<QGrid>,
}

impl Default for KnotConfig {
    fn default() -> Self {
        KnotConfig { order: 4, placement: Placement::Quantile, grid: None }
    }
}

/// Everything the pipeline needs besides the data and the models.
#[derive(Debug, Clone)]
pub struct PipelineConfig<T> {
    pub knots: KnotConfig,
    pub fit: FitOptions<T>,
    pub solver: SolverOptions,
    pub alpha: f64,
}

impl<T: Scalar> Default for PipelineConfig<T> {
    fn default() -> Self {
        // Aliased columns (for instance z equal to a covariate in a
        // varying-coefficient model) are dropped rather than rejected.
        PipelineConfig { knots: KnotConfig::default(), fit: FitOptions::truncating(), solver: SolverOptions::default(), alpha: 0.05 }
    }
}

/// Builds per-component basis specs for one grid point. `knot_fn(column, q)`
/// supplies quantile knots so that callers can compute them elsewhere.
pub fn basis_specs_with<T: Scalar>(
    spec: &ModelSpec,
    d: &Dataset<T>,
    q: &[usize],
    cfg: &KnotConfig,
    mut knot_fn: impl FnMut(&str, usize) -> Result<Vec<T>, SplineError>,
) -> Result<Vec<BasisSpec<T>>, ModelError> {
    let comps = spec.components(d)?;
    if comps.len() != q.len() {
        return Err(ModelError::GridShape { expected: comps.len(), got: q.len() });
    }
    comps
        .iter()
        .zip(q)
        .map(|(c, &qj)| match c.kind {
            TermKind::Linear => Ok(BasisSpec::linear()),
            TermKind::Smooth => {
                let knots = match cfg.placement {
                    Placement::Uniform => uniform_knots(qj),
                    Placement::Quantile => knot_fn(&c.knot_column, qj)?,
                };
                Ok(BasisSpec::new(cfg.order, knots)?)
            }
        })
        .collect()
}

pub fn basis_specs<T: Scalar>(
    spec: &ModelSpec,
    d: &Dataset<T>,
    q: &[usize],
    cfg: &KnotConfig,
) -> Result<Vec<BasisSpec<T>>, ModelError> {
    basis_specs_with(spec, d, q, cfg, |col, qj| {
        let values = d.column(col).ok_or_else(|| SplineError::InvalidKnots(format!("no column {col}")))?;
        quantile_knots(values, qj)
    })
}

/// Grid points as per-component knot counts (zero for linear terms).
pub fn grid_points<T: Scalar>(spec: &ModelSpec, d: &Dataset<T>, cfg: &KnotConfig) -> Result<Vec<Vec<usize>>, ModelError> {
    let comps = spec.components(d)?;
    let fix = |j: usize, q: usize| if comps[j].kind == TermKind::Linear { 0 } else { q };
    let grid = cfg.grid.clone().unwrap_or_else(|| QGrid::Shared(default_q_grid(d.n())));
    let mut points: Vec<Vec<usize>> = match grid {
        QGrid::Shared(qs) => qs.iter().map(|&q| (0..comps.len()).map(|j| fix(j, q)).collect()).collect(),
        QGrid::PerComponent(lists) => {
            if lists.len() != comps.len() {
                return Err(ModelError::GridShape { expected: comps.len(), got: lists.len() });
            }
            let mut acc: Vec<Vec<usize>> = vec![Vec::new()];
            for (j, list) in lists.iter().enumerate() {
                let choices: Vec<usize> = if comps[j].kind == TermKind::Linear { vec![0] } else { list.clone() };
                acc = acc
                    .into_iter()
                    .flat_map(|prefix| {
                        choices.iter().map(move |&q| {
                            let mut p = prefix.clone();
                            p.push(q);
                            p
                        })
                    })
                    .collect();
            }
            acc
        }
    };
    // linear-only models collapse to a single point
    points.dedup();
    if points.is_empty() {
        return Err(ModelError::EmptyGrid);
    }
    Ok(points)
}

/// Number of basis functions counted the way the adjusted APE counts them:
/// `Σκ_j` over the included components before the identifiability drop.
pub fn nominal_kappa<T: Scalar>(specs: &[BasisSpec<T>], drop: Option<usize>) -> usize {
    specs.iter().enumerate().filter(|&(j, _)| Some(j) != drop).map(|(_, s)| s.dimension()).sum()
}

/// Design matrix and working response of a model.
pub fn build_design<T: Scalar>(
    spec: &ModelSpec,
    d: &Dataset<T>,
    specs: &[BasisSpec<T>],
    drop: Option<usize>,
) -> Result<(DesignMatrix<T>, Vec<T>), ModelError> {
    match spec.resolved(d)? {
        ModelSpec::Additive { terms } => {
            let cols: Vec<&[T]> = terms.iter().map(|t| d.column(&t.column).expect("resolved column")).collect();
            let (design, _) = additive_from_columns(&cols, specs, drop)?;
            Ok((design, center_response(d).0))
        }
        ModelSpec::VaryingCoefficient { covariates } => {
            let z = d.z.as_deref().ok_or(ModelError::MissingIndexVariable)?;
            let xs: Vec<&[T]> = covariates.iter().map(|c| d.column(c).expect("resolved column")).collect();
            Ok((varycoef_from_columns(z, &xs, specs)?, d.y.clone()))
        }
    }
}

/// A fitted model with its leave-one-out errors.
#[derive(Debug, Clone)]
pub struct ModelFit<T> {
    pub spec: ModelSpec,
    pub specs: Vec<BasisSpec<T>>,
    pub q: Vec<usize>,
    pub drop: Option<usize>,
    /// Nominal basis count used by the adjusted APE.
    pub kappa: usize,
    pub loocv: LoocvResult<T>,
    pub ape_adj: T,
}

impl<T: Scalar> ModelFit<T> {
    pub fn ape(&self) -> T {
        self.loocv.ape
    }

    pub fn columns(&self) -> usize {
        self.specs.iter().enumerate().filter(|&(j, _)| Some(j) != self.drop).count()
    }
}

/// `Σ ε̂ᵢ² / (n − κ)`.
pub fn adjusted_ape<T: Scalar>(errors: &[T], kappa: usize) -> Result<T, ModelError> {
    let n = errors.len();
    if kappa >= n {
        return Err(ModelError::TooManyBasisFunctions { kappa, n });
    }
    Ok(errors.iter().map(|&e| e * e).sum::<T>() / T::of_usize(n - kappa))
}

pub fn fit_model<T: Scalar>(
    spec: &ModelSpec,
    d: &Dataset<T>,
    specs: Vec<BasisSpec<T>>,
    q: Vec<usize>,
    drop: Option<usize>,
    opts: &FitOptions<T>,
) -> Result<ModelFit<T>, ModelError> {
    let (design, y) = build_design(spec, d, &specs, drop)?;
    let loocv = loocv_fast(&design.matrix, &y, opts)?;
    let kappa = nominal_kappa(&specs, drop);
    let ape_adj = adjusted_ape(&loocv.errors, kappa)?;
    Ok(ModelFit { spec: spec.resolved(d)?, specs, q, drop, kappa, loocv, ape_adj })
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridRow {
    pub q: Vec<usize>,
    pub kappa: Option<usize>,
    pub ape: Option<f64>,
    pub ape_adj: Option<f64>,
    /// Why the point could not be fitted.
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Selection<T> {
    pub best: ModelFit<T>,
    pub table: Vec<GridRow>,
}

impl<T: Scalar> Selection<T> {
    /// Grid points that failed, as `(q, reason)`.
    pub fn skipped(&self) -> impl Iterator<Item = (&[usize], &str)> {
        self.table.iter().filter_map(|r| r.error.as_deref().map(|e| (r.q.as_slice(), e)))
    }
}

/// Minimizes the adjusted APE over a materialized table of fits; ties go to
/// the smaller `κ`, then to the earlier grid point.
pub fn select_from_fits<T: Scalar>(
    points: Vec<Vec<usize>>,
    fits: Vec<Result<ModelFit<T>, ModelError>>,
) -> Result<Selection<T>, ModelError> {
    let mut table = Vec::with_capacity(points.len());
    let mut best: Option<ModelFit<T>> = None;
    let mut first_error = None;
    for (q, fit) in points.into_iter().zip(fits) {
        match fit {
            Ok(f) => {
                table.push(GridRow {
                    q,
                    kappa: Some(f.kappa),
                    ape: Some(f.loocv.ape.as_f64()),
                    ape_adj: Some(f.ape_adj.as_f64()),
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some(b) => f.ape_adj < b.ape_adj || (f.ape_adj == b.ape_adj && f.kappa < b.kappa),
                };
                if better {
                    best = Some(f);
                }
            }
            Err(e) => {
                let msg = e.to_string();
                first_error.get_or_insert_with(|| format!("q = {q:?}: {msg}"));
                table.push(GridRow { q, kappa: None, ape: None, ape_adj: None, error: Some(msg) });
            }
        }
    }
    match best {
        Some(best) => Ok(Selection { best, table }),
        None => Err(ModelError::AllGridPointsFailed(first_error.unwrap_or_else(|| "empty grid".into()))),
    }
}

/// Chooses knot counts for `spec` by minimizing the adjusted APE. Grid points
/// are fitted in parallel; the choice does not depend on scheduling.
pub fn select_knot_counts<T: Scalar>(
    spec: &ModelSpec,
    d: &Dataset<T>,
    cfg: &PipelineConfig<T>,
) -> Result<Selection<T>, ModelError> {
    let points = grid_points(spec, d, &cfg.knots)?;
    let fits: Vec<_> = points
        .par_iter()
        .map(|q| {
            let specs = basis_specs(spec, d, q, &cfg.knots)?;
            fit_model(spec, d, specs, q.clone(), None, &cfg.fit)
        })
        .collect();
    select_from_fits(points, fits)
}

/// Outcome of comparing two models on one dataset.
#[derive(Debug, Clone)]
pub struct Comparison<T> {
    pub a: Selection<T>,
    pub b: Selection<T>,
    pub scores: ScoreVector<T>,
    pub report: ElrReport<T>,
}

/// Selects knots for both models independently, then tests equal prediction
/// accuracy with `ξᵢ = ε̂²_{a,i} − ε̂²_{b,i}`.
pub fn compare<T: Scalar>(
    d: &Dataset<T>,
    a: &ModelSpec,
    b: &ModelSpec,
    cfg: &PipelineConfig<T>,
) -> Result<Comparison<T>, ModelError> {
    let (sa, sb) = rayon::join(|| select_knot_counts(a, d, cfg), || select_knot_counts(b, d, cfg));
    let (sa, sb) = (sa?, sb?);
    let scores = score_diff_floored(&sa.best.loocv, &sb.best.loocv, response_floor(d))?.with_labels(sa.best.spec.to_string(), sb.best.spec.to_string());
    let stat = elr_statistic(&scores, &cfg.solver)?;
    let report = decide(&stat, cfg.alpha, DecisionMode::Comparison)?;
    Ok(Comparison { a: sa, b: sb, scores, report })
}

/// Rounding-noise level of squared prediction errors for `d`.
pub fn response_floor<T: Scalar>(d: &Dataset<T>) -> T {
    let ss = d.y.iter().map(|&y| (y - d.y_bar) * (y - d.y_bar)).sum::<T>();
    noise_floor(ss, d.n())
}

/// Position of `column` among the terms of an additive model.
pub fn term_position<T: Scalar>(spec: &ModelSpec, d: &Dataset<T>, column: &str) -> Result<usize, ModelError> {
    match spec.resolved(d)? {
        ModelSpec::Additive { terms } if terms.len() >= 2 => {
            terms.iter().position(|t| t.column == column).ok_or_else(|| ModelError::NotATerm(column.to_string()))
        }
        _ => Err(ModelError::NotNestable),
    }
}

/// Outcome of testing whether one additive component can be dropped.
#[derive(Debug, Clone)]
pub struct VariableTest<T> {
    pub selection: Selection<T>,
    pub dropped: ModelFit<T>,
    pub drop: usize,
    /// `η̂ᵢ = ε̂²_{reduced,i} − ε̂²_{full,i}`.
    pub scores: ScoreVector<T>,
    pub report: ElrReport<T>,
}

/// Tests `m_ℓ = 0` in an additive model. The reduced model keeps the knot
/// sequences chosen for the full model, so its design is the full design
/// without component `ℓ`.
pub fn test_variable<T: Scalar>(
    d: &Dataset<T>,
    spec: &ModelSpec,
    column: &str,
    cfg: &PipelineConfig<T>,
) -> Result<VariableTest<T>, ModelError> {
    let drop = term_position(spec, d, column)?;
    let selection = select_knot_counts(spec, d, cfg)?;
    let full = &selection.best;
    let dropped = fit_model(spec, d, full.specs.clone(), full.q.clone(), Some(drop), &cfg.fit)?;
    let scores = score_diff_floored(&dropped.loocv, &full.loocv, response_floor(d))?.with_labels(format!("{} without {column}", full.spec), full.spec.to_string());
    let stat = elr_statistic(&scores, &cfg.solver)?;
    let report = decide(&stat, cfg.alpha, DecisionMode::VariableSignificance)?;
    Ok(VariableTest { selection, dropped, drop, scores, report })
}
