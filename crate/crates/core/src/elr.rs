//! Empirical likelihood ratio for a zero-mean hypothesis on a score vector.

use serde_json::Value;
use thiserror::Error;

use crate::chi2::{self, DomainError};
use crate::loocv::LoocvResult;
use crate::num::{mean, Scalar};
use crate::root::{decreasing_root, RootOptions, StopReason};

/// Ingested statistics at or above this value are read as `+∞`.
pub const INFINITY_SENTINEL: f64 = 1e16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElrError {
    #[error("score vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
    #[error("empty score vector")]
    Empty,
    #[error("multiplier iteration did not converge in {0} steps")]
    NoConvergence(usize),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Paired differences of squared leave-one-out errors, `ξᵢ = ε̂²_{a,i} − ε̂²_{b,i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector<T> {
    pub scores: Vec<T>,
    pub label_a: String,
    pub label_b: String,
    pub ape_a: T,
    pub ape_b: T,
    pub dape: T,
}

impl<T: Scalar> ScoreVector<T> {
    /// Wraps raw scores. The APE fields are set so that `dape` is the score mean.
    pub fn from_scores(scores: Vec<T>) -> Self {
        let dape = mean(&scores);
        ScoreVector { scores, label_a: "a".into(), label_b: "b".into(), ape_a: dape, ape_b: T::zero(), dape }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn with_labels(mut self, a: impl Into<String>, b: impl Into<String>) -> Self {
        self.label_a = a.into();
        self.label_b = b.into();
        self
    }
}

pub fn score_diff<T: Scalar>(a: &LoocvResult<T>, b: &LoocvResult<T>) -> Result<ScoreVector<T>, ElrError> {
    if a.errors.len() != b.errors.len() {
        return Err(ElrError::LengthMismatch(a.errors.len(), b.errors.len()));
    }
    let scores = a.errors.iter().zip(&b.errors).map(|(&ea, &eb)| ea * ea - eb * eb).collect();
    Ok(ScoreVector { scores, label_a: "a".into(), label_b: "b".into(), ape_a: a.ape, ape_b: b.ape, dape: a.ape - b.ape })
}

/// `√ε` times the mean squared centered response. Squared prediction errors
/// at or below it are rounding noise.
pub fn noise_floor<T: Scalar>(sum_sq_centered: T, n: usize) -> T {
    T::epsilon().sqrt() * sum_sq_centered / T::of_usize(n.max(1))
}

/// True when both models fit every point to within `floor`.
pub fn negligible_errors<T: Scalar>(a: &[T], b: &[T], floor: T) -> bool {
    a.iter().chain(b).all(|&e| e * e <= floor)
}

/// [`score_diff`], with scores and `dape` set to zero when both models fit
/// the data to rounding accuracy. Such scores carry no information about
/// which model predicts better.
pub fn score_diff_floored<T: Scalar>(a: &LoocvResult<T>, b: &LoocvResult<T>, floor: T) -> Result<ScoreVector<T>, ElrError> {
    let mut s = score_diff(a, b)?;
    if negligible_errors(&a.errors, &b.errors, floor) {
        s.scores.iter_mut().for_each(|v| *v = T::zero());
        s.dape = T::zero();
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative residual tolerance: stop once `|f(λ)| ≤ tol·Σ|ξᵢ|`.
    pub tol: f64,
    /// Step tolerance: stop once `|λ_t − λ_{t−1}| < step_tol / max|ξᵢ|`.
    pub step_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, step_tol: 1e-10, max_iter: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Solution<T> {
    pub lambda: T,
    pub iterations: usize,
    pub stop: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Multiplier<T> {
    Solved(Solution<T>),
    /// Every score has the same strict sign; zero lies outside their hull.
    Infeasible,
    /// Every score is zero.
    AllZero,
    /// Zero is an endpoint of the score range but not every score is zero.
    /// Only weights concentrated on the zero scores satisfy the constraint,
    /// so the likelihood ratio is zero and `R = +∞`.
    Boundary,
}

/// Summary of a score vector that is enough to drive the solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRange<T> {
    pub min: T,
    pub max: T,
    pub abs_sum: T,
}

impl<T: Scalar> ScoreRange<T> {
    pub fn of(scores: &[T]) -> Self {
        let mut r = ScoreRange { min: T::infinity(), max: T::neg_infinity(), abs_sum: T::zero() };
        for &s in scores {
            r = r.merge(ScoreRange { min: s, max: s, abs_sum: s.abs() });
        }
        r
    }

    pub fn merge(self, o: Self) -> Self {
        ScoreRange { min: self.min.min(o.min), max: self.max.max(o.max), abs_sum: self.abs_sum + o.abs_sum }
    }
}

/// `f(λ) = Σ ξᵢ/(1+λξᵢ)` and `f'(λ) = −Σ ξᵢ²/(1+λξᵢ)²`, or `None` if some
/// `1 + λξᵢ ≤ 0`.
pub fn estimating_equation<T: Scalar>(scores: &[T], lambda: T) -> Option<(T, T)> {
    let mut f = T::zero();
    let mut df = T::zero();
    for &s in scores {
        let d = T::one() + lambda * s;
        if d <= T::zero() {
            return None;
        }
        let r = s / d;
        f = f + r;
        df = df - r * r;
    }
    Some((f, df))
}

/// Solves `f(λ) = 0` given the score range and a callback that evaluates
/// `(f, f')`, possibly as a sum of partial results held elsewhere.
///
/// Newton iteration starts at `λ = 0` and is confined to the open bracket
/// `(−1/max ξ, −1/min ξ)` on which `f` is strictly decreasing.
pub fn solve_multiplier_by<T: Scalar>(
    range: ScoreRange<T>,
    eval: impl FnMut(T) -> Option<(T, T)>,
    opts: &SolverOptions,
) -> Result<Multiplier<T>, ElrError> {
    let zero = T::zero();
    if range.abs_sum == zero {
        return Ok(Multiplier::AllZero);
    }
    if range.min > zero || range.max < zero {
        return Ok(Multiplier::Infeasible);
    }
    if range.min == zero || range.max == zero {
        return Ok(Multiplier::Boundary);
    }
    let lo = -T::one() / range.max;
    let hi = -T::one() / range.min;
    let ropts = RootOptions {
        ftol: T::of(opts.tol) * range.abs_sum,
        xtol: T::of(opts.step_tol) * lo.abs().min(hi),
        max_iter: opts.max_iter,
    };
    match decreasing_root(eval, lo, hi, zero, &ropts) {
        Ok(r) => Ok(Multiplier::Solved(Solution { lambda: r.x, iterations: r.iterations, stop: r.stop })),
        Err(_) => Err(ElrError::NoConvergence(opts.max_iter)),
    }
}

pub fn solve_multiplier<T: Scalar>(scores: &[T], opts: &SolverOptions) -> Result<Multiplier<T>, ElrError> {
    check_scores(scores)?;
    solve_multiplier_by(ScoreRange::of(scores), |l| estimating_equation(scores, l), opts)
}

/// `2 Σ log(1 + λξᵢ)`.
pub fn log_ratio<T: Scalar>(scores: &[T], lambda: T) -> T {
    T::of(2.0) * scores.iter().map(|&s| (lambda * s).ln_1p()).sum::<T>()
}

/// Statistic and multiplier before a decision is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ElrStatistic<T> {
    /// `R ∈ [0, +∞]`.
    pub statistic: T,
    pub multiplier: Option<T>,
    pub feasible: bool,
    pub dape: T,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub n: usize,
}

impl<T: Scalar> ElrStatistic<T> {
    /// Builds the statistic from a solver outcome; `log_ratio` is evaluated
    /// only for a solved multiplier.
    pub fn from_multiplier(m: Multiplier<T>, dape: T, n: usize, log_ratio: impl FnOnce(T) -> T) -> Self {
        let (statistic, multiplier, feasible, iterations, stop) = match m {
            Multiplier::Solved(s) => (log_ratio(s.lambda).max(T::zero()), Some(s.lambda), true, s.iterations, Some(s.stop)),
            Multiplier::AllZero => (T::zero(), Some(T::zero()), true, 0, None),
            Multiplier::Boundary => (T::infinity(), None, true, 0, None),
            Multiplier::Infeasible => (T::infinity(), None, false, 0, None),
        };
        ElrStatistic { statistic, multiplier, feasible, dape, iterations, stop, n }
    }
}

pub fn elr_statistic<T: Scalar>(s: &ScoreVector<T>, opts: &SolverOptions) -> Result<ElrStatistic<T>, ElrError> {
    let m = solve_multiplier(&s.scores, opts)?;
    Ok(ElrStatistic::from_multiplier(m, s.dape, s.len(), |l| log_ratio(&s.scores, l)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Decision {
    Equivalent,
    PreferA,
    PreferB,
    /// Rejection with `dape` exactly zero; the rule does not say which model wins.
    TieBreakUndefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DecisionMode {
    /// Two competing models; rejection prefers the smaller APE.
    Comparison,
    /// Nested models with label `a` the reduced one; rejection keeps the variable.
    VariableSignificance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum VariableVerdict {
    Drop,
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElrReport<T> {
    pub statistic: T,
    pub multiplier: Option<T>,
    pub p_value: f64,
    pub feasible: bool,
    pub dape: T,
    pub decision: Decision,
    pub mode: DecisionMode,
    pub alpha: f64,
    pub critical_value: f64,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub n: usize,
}

impl<T: Scalar> ElrReport<T> {
    pub fn rejected(&self) -> bool {
        self.decision != Decision::Equivalent
    }

    pub fn variable_verdict(&self) -> VariableVerdict {
        if self.rejected() {
            VariableVerdict::Keep
        } else {
            VariableVerdict::Drop
        }
    }

    /// Same statistic judged at another level.
    pub fn at_level(&self, alpha: f64) -> Result<Self, ElrError> {
        let stat = ElrStatistic {
            statistic: self.statistic,
            multiplier: self.multiplier,
            feasible: self.feasible,
            dape: self.dape,
            iterations: self.iterations,
            stop: self.stop,
            n: self.n,
        };
        decide(&stat, alpha, self.mode)
    }

    pub fn to_json(&self) -> Value {
        let mut v = serde_json::json!({
            "statistic": stat_to_json(self.statistic.as_f64()),
            "multiplier": self.multiplier.map(|m| m.as_f64()),
            "p_value": self.p_value,
            "feasible": self.feasible,
            "dape": self.dape.as_f64(),
            "decision": self.decision,
            "mode": self.mode,
            "alpha": self.alpha,
            "critical_value": self.critical_value,
            "iterations": self.iterations,
            "stop": self.stop.map(|s| format!("{s:?}")),
            "n": self.n,
        });
        if self.mode == DecisionMode::VariableSignificance {
            v["verdict"] = serde_json::json!(self.variable_verdict());
        }
        v
    }
}

pub fn decide<T: Scalar>(r: &ElrStatistic<T>, alpha: f64, mode: DecisionMode) -> Result<ElrReport<T>, ElrError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DomainError::Probability(alpha).into());
    }
    let critical_value = chi2::chi2_1_quantile(1.0 - alpha)?;
    let stat = r.statistic.as_f64();
    let p_value = chi2::chi2_1_sf(stat)?;
    let decision = if stat < critical_value {
        Decision::Equivalent
    } else if r.dape < T::zero() {
        Decision::PreferA
    } else if r.dape > T::zero() {
        Decision::PreferB
    } else {
        Decision::TieBreakUndefined
    };
    Ok(ElrReport {
        statistic: r.statistic,
        multiplier: r.multiplier,
        p_value,
        feasible: r.feasible,
        dape: r.dape,
        decision,
        mode,
        alpha,
        critical_value,
        iterations: r.iterations,
        stop: r.stop,
        n: r.n,
    })
}

/// Statistic, then decision, in one call.
pub fn elr_test<T: Scalar>(
    s: &ScoreVector<T>,
    alpha: f64,
    mode: DecisionMode,
    opts: &SolverOptions,
) -> Result<ElrReport<T>, ElrError> {
    decide(&elr_statistic(s, opts)?, alpha, mode)
}

/// JSON form of a statistic: infinite values become the string `"+inf"`.
pub fn stat_to_json(x: f64) -> Value {
    if x == f64::INFINITY {
        Value::String("+inf".into())
    } else {
        serde_json::json!(x)
    }
}

/// Reads a statistic written by [`stat_to_json`] or by tools that use a
/// large finite sentinel for `+∞`.
pub fn stat_from_json(v: &Value) -> Option<f64> {
    match v {
        Value::String(s) if matches!(s.as_str(), "+inf" | "inf" | "Infinity") => Some(f64::INFINITY),
        Value::Number(n) => n.as_f64().map(|x| if x >= INFINITY_SENTINEL { f64::INFINITY } else { x }),
        _ => None,
    }
}

fn check_scores<T: Scalar>(scores: &[T]) -> Result<(), ElrError> {
    if scores.is_empty() {
        return Err(ElrError::Empty);
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(ElrError::NonFinite { index });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(xs: &[f64]) -> Multiplier<f64> {
        solve_multiplier(xs, &SolverOptions::default()).unwrap()
    }

    fn lambda(xs: &[f64]) -> f64 {
        match solve(xs) {
            Multiplier::Solved(s) => s.lambda,
            other => panic!("{other:?}"),
        }
    }

    fn stat(xs: &[f64]) -> ElrStatistic<f64> {
        elr_statistic(&ScoreVector::from_scores(xs.to_vec()), &SolverOptions::default()).unwrap()
    }

    #[test]
    fn symmetric_scores_give_zero() {
        assert_eq!(lambda(&[-1.0, 1.0]), 0.0);
        assert_eq!(stat(&[-1.0, 1.0]).statistic, 0.0);
    }

    #[test]
    fn two_point_closed_form() {
        assert!((lambda(&[-1.0, 3.0]) - 1.0 / 3.0).abs() < 1e-12);
        let r = stat(&[-1.0, 3.0]).statistic;
        assert!((r - 2.0 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_point_matches_grid_search_of_weights() {
        // weights (p, 1−p) with −p + 3(1−p) = 0 → p = 3/4; −2 log Π(n pᵢ)
        let best = (0..=100_000)
            .map(|k| k as f64 / 100_000.0)
            .filter(|p| (-p + 3.0 * (1.0 - p)).abs() < 1e-4)
            .map(|p| -2.0 * ((2.0 * p).ln() + (2.0 * (1.0 - p)).ln()))
            .fold(f64::INFINITY, f64::min);
        assert!((stat(&[-1.0, 3.0]).statistic - best).abs() < 1e-3);
    }

    #[test]
    fn one_sided_scores_are_infeasible() {
        assert_eq!(solve(&[2.0, 3.0]), Multiplier::Infeasible);
        let s = stat(&[5.0, 7.0, 9.0]);
        assert!(s.statistic.is_infinite() && !s.feasible && s.multiplier.is_none());
        assert_eq!(solve(&[-2.0, -3.0]), Multiplier::Infeasible);
    }

    #[test]
    fn zero_scores() {
        assert_eq!(solve(&[0.0, 0.0, 0.0]), Multiplier::AllZero);
        assert_eq!(stat(&[0.0, 0.0]).statistic, 0.0);
        assert_eq!(solve(&[0.0, 1.0, 2.0]), Multiplier::Boundary);
        let s = stat(&[0.0, 1.0]);
        assert!(s.feasible && s.statistic.is_infinite());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(solve_multiplier(&[1.0, f64::NAN], &SolverOptions::default()), Err(ElrError::NonFinite { index: 1 })));
        assert!(matches!(solve_multiplier::<f64>(&[], &SolverOptions::default()), Err(ElrError::Empty)));
    }

    #[test]
    fn score_diff_examples() {
        let mk = |e: Vec<f64>| {
            let ape = e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64;
            LoocvResult { leverages: vec![0.0; e.len()], residuals: e.clone(), errors: e, ape, kappa: 1 }
        };
        let s = score_diff(&mk(vec![1.0, 2.0]), &mk(vec![1.0, 2.0])).unwrap();
        assert_eq!((s.scores.clone(), s.dape), (vec![0.0, 0.0], 0.0));
        let s = score_diff(&mk(vec![2.0, 0.0]), &mk(vec![0.0, 2.0])).unwrap();
        assert_eq!((s.scores.clone(), s.dape), (vec![4.0, -4.0], 0.0));
        assert!(score_diff(&mk(vec![1.0]), &mk(vec![1.0, 2.0])).is_err());

        let floor = noise_floor(1.0, 1);
        let s = score_diff_floored(&mk(vec![1e-12, -3e-13]), &mk(vec![2e-13, 1e-14]), floor).unwrap();
        assert_eq!((s.scores.clone(), s.dape), (vec![0.0, 0.0], 0.0));
        let s = score_diff_floored(&mk(vec![1e-3, 0.0]), &mk(vec![0.0, 0.0]), floor).unwrap();
        assert_eq!(s.scores, vec![1e-6, 0.0]);
    }

    #[test]
    fn decisions() {
        let partial = |r: f64, dape: f64| ElrStatistic {
            statistic: r,
            multiplier: None,
            feasible: true,
            dape,
            iterations: 0,
            stop: None,
            n: 10,
        };
        let d = |r, dape| decide(&partial(r, dape), 0.05, DecisionMode::Comparison).unwrap().decision;
        assert_eq!(d(2.0, 1.0), Decision::Equivalent);
        assert_eq!(d(19.33, 19.36), Decision::PreferB);
        assert_eq!(d(f64::INFINITY, -0.5), Decision::PreferA);
        assert_eq!(d(5.0, 0.0), Decision::TieBreakUndefined);
        let v = decide(&partial(5.0, -1.0), 0.05, DecisionMode::VariableSignificance).unwrap();
        assert_eq!(v.variable_verdict(), VariableVerdict::Keep);
        let v = decide(&partial(1.0, 1.0), 0.05, DecisionMode::VariableSignificance).unwrap();
        assert_eq!(v.variable_verdict(), VariableVerdict::Drop);
        assert!(decide(&partial(1.0, 1.0), 0.0, DecisionMode::Comparison).is_err());
        let inf = decide(&partial(f64::INFINITY, 1.0), 0.05, DecisionMode::Comparison).unwrap();
        assert_eq!(inf.p_value, 0.0);
    }

    #[test]
    fn json_infinity_round_trip() {
        assert_eq!(stat_to_json(f64::INFINITY), Value::String("+inf".into()));
        assert_eq!(stat_from_json(&stat_to_json(f64::INFINITY)), Some(f64::INFINITY));
        assert_eq!(stat_from_json(&serde_json::json!(1e16)), Some(f64::INFINITY));
        assert_eq!(stat_from_json(&serde_json::json!(3.5)), Some(3.5));
        assert_eq!(stat_from_json(&stat_to_json(0.1 + 0.2)), Some(0.1 + 0.2));
    }

    #[test]
    fn works_in_single_precision() {
        let l = match solve_multiplier(&[-1.0f32, 3.0], &SolverOptions { tol: 1e-6, ..Default::default() }).unwrap() {
            Multiplier::Solved(s) => s.lambda,
            other => panic!("{other:?}"),
        };
        assert!((l - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn heavily_skewed_scores_converge() {
        // one huge positive score pushes Newton from 0 past the pole
        let mut xs = vec![-1.0; 50];
        xs.push(1e6);
        let l = lambda(&xs);
        let (f, _) = estimating_equation(&xs, l).unwrap();
        assert!(f.abs() <= 1e-10 * xs.iter().map(|x: &f64| x.abs()).sum::<f64>());
    }
}
