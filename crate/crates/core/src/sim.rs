//! Monte-Carlo size and power studies on the simulation designs.
//!
//! Every replication owns a ChaCha20 substream: the generator is seeded with
//! the study seed and its stream is set to the replication index. The same
//! index is reused at every parameter point, so neighbouring points share
//! their covariates and noise draws. Tables do not depend on thread count.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chi2;
use crate::data::{rescale_unit_interval, Dataset};
use crate::distributed::{distributed_test_variable, DistributedConfig};
use crate::elr::DecisionMode;
use crate::model::{compare, ModelSpec, PipelineConfig};

/// Identifies the random number generator in reports.
pub const GENERATOR: &str = "ChaCha20 (rand_chacha), seeded with the study seed, stream = replication index";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Simulation design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Example {
    /// Varying-coefficient vs additive model, both covariates, `z ~ U(0,1)`.
    Ex2,
    /// One-covariate varying-coefficient model with `z = x₁` vs additive model.
    Ex3,
    /// Additive model with and without `x₁`, run on the sharded engine.
    Ex4,
}

impl FromStr for Example {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().trim_start_matches("ex") {
            "2" => Ok(Example::Ex2),
            "3" => Ok(Example::Ex3),
            "4" => Ok(Example::Ex4),
            _ => Err(SimError::InvalidConfig(format!("unknown example {s:?}, expected 2, 3 or 4"))),
        }
    }
}

impl fmt::Display for Example {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self {
            Example::Ex2 => 2,
            Example::Ex3 => 3,
            Example::Ex4 => 4,
        };
        write!(f, "{k}")
    }
}

/// Error law of the one-covariate comparison design.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    #[default]
    Normal,
    /// `sin(x₂) N(0, 1)`.
    CondNormal,
    /// `sin(x₂) t(6)`.
    CondT6,
    /// `0.95 N(0, 1) + 0.05 N(0, 3²)`.
    MixedNormal,
}

impl FromStr for ErrorKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "normal" => Ok(ErrorKind::Normal),
            "cond_normal" => Ok(ErrorKind::CondNormal),
            "cond_t6" => Ok(ErrorKind::CondT6),
            "mixed_normal" => Ok(ErrorKind::MixedNormal),
            _ => Err(SimError::InvalidConfig(format!("unknown error kind {s:?}"))),
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorKind::Normal => "normal",
            ErrorKind::CondNormal => "cond_normal",
            ErrorKind::CondT6 => "cond_t6",
            ErrorKind::MixedNormal => "mixed_normal",
        })
    }
}

/// One point of the parameter sweep; `theta` is used by [`Example::Ex2`] only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamPoint {
    pub theta: f64,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub example: Example,
    pub n: usize,
    pub points: Vec<ParamPoint>,
    pub error_kind: ErrorKind,
    pub n_reps: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub workers: usize,
    pub pipeline: PipelineConfig<f64>,
}

impl SimConfig {
    /// Desk-scale defaults: `n = 500`, 400 replications, levels 5% and 10%.
    pub fn new(example: Example, points: Vec<ParamPoint>) -> Self {
        SimConfig {
            example,
            n: 500,
            points,
            error_kind: ErrorKind::Normal,
            n_reps: 400,
            alphas: vec![0.05, 0.10],
            seed: 20_240_611,
            workers: 1,
            pipeline: PipelineConfig::default(),
        }
    }

    /// Sample size and replication count of the published studies.
    pub fn paper_scale(mut self) -> Self {
        self.n = if self.example == Example::Ex4 { 21_000 } else { 1000 };
        self.n_reps = 600;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.n_reps == 0 {
            return bad("n_reps must be at least 1");
        }
        if self.points.is_empty() {
            return bad("parameter grid is empty");
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return bad("alpha levels must lie in (0, 1)");
        }
        if self.workers == 0 || self.workers > self.n {
            return bad("workers must be between 1 and n");
        }
        if self.n < 10 {
            return bad("n must be at least 10");
        }
        if self.points.iter().any(|p| !p.theta.is_finite() || !p.tau.is_finite()) {
            return bad("parameters must be finite");
        }
        Ok(())
    }
}

/// Generator for replication `rep`.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Standard normal pair with correlation 0.5, via the Cholesky factor of the
/// correlation matrix.
pub fn correlated_normals(rng: &mut impl Rng) -> (f64, f64) {
    const RHO: f64 = 0.5;
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    (a, RHO * a + (1.0 - RHO * RHO).sqrt() * b)
}

/// Regression function of the two-covariate design.
pub fn example2_mean(x1: f64, x2: f64, z: f64, theta: f64, tau: f64) -> f64 {
    let vc = x1 * (1.0 + z).exp() + if z > 0.5 { x2 } else { 0.0 } + 1.5 * (PI * z).cos();
    let add = x1.exp() * x1.cos() + 0.5 * x2.sin();
    0.5 * (x1 + x2) + theta * vc + tau * add
}

pub fn example2_response(x1: f64, x2: f64, z: f64, theta: f64, tau: f64, eps: f64) -> f64 {
    example2_mean(x1, x2, z, theta, tau) + (PI * x1).sin() * eps
}

pub fn example3_mean(x1: f64, x2: f64, tau: f64) -> f64 {
    0.5 * x1 + 0.25 * x1 * x1.cos() + tau * x2.exp() * x2.cos()
}

pub fn example4_mean(x1: f64, x2: f64, tau: f64) -> f64 {
    tau * x1.exp() * x1.cos() + 0.1 * x2 * (1.0 + x2)
}

pub fn example4_response(x1: f64, x2: f64, tau: f64, eps: f64) -> f64 {
    example4_mean(x1, x2, tau) + (PI * x2).sin() * eps
}

/// Noise of the one-covariate design given `x₂`.
pub fn example3_error(kind: ErrorKind, x2: f64, rng: &mut impl Rng) -> f64 {
    match kind {
        ErrorKind::Normal => StandardNormal.sample(rng),
        ErrorKind::CondNormal => {
            let e: f64 = StandardNormal.sample(rng);
            x2.sin() * e
        }
        ErrorKind::CondT6 => x2.sin() * StudentT::new(6.0).expect("valid dof").sample(rng),
        ErrorKind::MixedNormal => {
            let sd = if rng.random::<f64>() < 0.95 { 1.0 } else { 3.0 };
            let e: f64 = StandardNormal.sample(rng);
            sd * e
        }
    }
}

fn names(k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("x{j}")).collect()
}

/// Raw (unscaled) sample of the two-covariate design.
pub fn gen_example2(n: usize, theta: f64, tau: f64, rng: &mut impl Rng) -> Dataset<f64> {
    let (mut x1, mut x2, mut z, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let (a, b) = correlated_normals(rng);
        let zi: f64 = rng.random();
        let eps: f64 = StandardNormal.sample(rng);
        y.push(example2_response(a, b, zi, theta, tau, eps));
        x1.push(a);
        x2.push(b);
        z.push(zi);
    }
    Dataset::new("y", y, names(2), vec![x1, x2], Some(("z".into(), z))).expect("finite draws")
}

/// Raw sample of the one-covariate comparison design; the index variable is a
/// copy of `x₁`.
pub fn gen_example3(n: usize, tau: f64, kind: ErrorKind, rng: &mut impl Rng) -> Dataset<f64> {
    let (mut x1, mut x2, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let (a, b) = correlated_normals(rng);
        y.push(example3_mean(a, b, tau) + example3_error(kind, b, rng));
        x1.push(a);
        x2.push(b);
    }
    let z = x1.clone();
    Dataset::new("y", y, names(2), vec![x1, x2], Some(("z".into(), z))).expect("finite draws")
}

/// Raw sample of the heteroscedastic additive design.
pub fn gen_example4(n: usize, tau: f64, rng: &mut impl Rng) -> Dataset<f64> {
    let (mut x1, mut x2, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let (a, b) = correlated_normals(rng);
        let eps: f64 = StandardNormal.sample(rng);
        y.push(example4_response(a, b, tau, eps));
        x1.push(a);
        x2.push(b);
    }
    Dataset::new("y", y, names(2), vec![x1, x2], None).expect("finite draws")
}

/// Outcome of one replication at one parameter point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub point: usize,
    pub theta: f64,
    pub tau: f64,
    pub rep: usize,
    pub seed: u64,
    pub statistic: Option<f64>,
    pub dape: Option<f64>,
    /// One entry per alpha level: whether the null was rejected.
    pub rejected: Vec<bool>,
    pub decision: Option<String>,
    pub error: Option<String>,
}

struct RepOutcome {
    statistic: f64,
    dape: f64,
    rejected: Vec<bool>,
    decision: String,
}

fn run_replication(cfg: &SimConfig, p: ParamPoint, rep: usize) -> Result<RepOutcome, String> {
    let mut rng = replication_rng(cfg.seed, rep as u64);
    let report = match cfg.example {
        Example::Ex2 | Example::Ex3 => {
            let (raw, a, b) = if cfg.example == Example::Ex2 {
                (gen_example2(cfg.n, p.theta, p.tau, &mut rng), ModelSpec::varycoef(["x1", "x2"]), ModelSpec::additive(["x1", "x2"]))
            } else {
                (gen_example3(cfg.n, p.tau, cfg.error_kind, &mut rng), ModelSpec::varycoef(["x1"]), ModelSpec::additive(["x1", "x2"]))
            };
            let d = rescale_unit_interval(&raw).map_err(|e| e.to_string())?;
            compare(&d, &a, &b, &cfg.pipeline).map_err(|e| e.to_string())?.report
        }
        Example::Ex4 => {
            let raw = gen_example4(cfg.n, p.tau, &mut rng);
            let dcfg = DistributedConfig { workers: cfg.workers, seed: rng.random() };
            let spec = ModelSpec::additive(["x1", "x2"]);
            distributed_test_variable(&raw, &spec, "x1", &cfg.pipeline, &dcfg).map_err(|e| e.to_string())?.report
        }
    };
    let rejected = cfg
        .alphas
        .iter()
        .map(|&a| report.at_level(a).map(|r| r.rejected()).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let decision = match report.mode {
        DecisionMode::VariableSignificance => format!("{:?}", report.variable_verdict()),
        DecisionMode::Comparison => format!("{:?}", report.decision),
    };
    Ok(RepOutcome { statistic: report.statistic, dape: report.dape, rejected, decision })
}

/// Aggregated rejection rate at one parameter point and level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionRow {
    pub example: String,
    pub error_kind: String,
    pub theta: f64,
    pub tau: f64,
    pub n: usize,
    pub workers: usize,
    pub alpha: f64,
    pub reps: usize,
    pub completed: usize,
    pub failures: usize,
    pub rejections: usize,
    pub rate: f64,
    /// `√(r(1 − r)/reps)`.
    pub mc_se: f64,
    pub mean_dape: f64,
    /// Sign of `mean_dape`: -1, 0 or 1.
    pub dape_sign: i8,
    /// Share of completed replications whose DAPE has the sign of `mean_dape`.
    pub sign_agreement: f64,
    /// False when more than 1% of replications failed.
    pub valid: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RejectionTable {
    pub generator: String,
    pub seed: u64,
    pub rows: Vec<RejectionRow>,
}

impl RejectionTable {
    pub fn row(&self, point: ParamPoint, alpha: f64) -> Option<&RejectionRow> {
        self.rows.iter().find(|r| r.theta == point.theta && r.tau == point.tau && r.alpha == alpha)
    }

    pub fn is_valid(&self) -> bool {
        self.rows.iter().all(|r| r.valid)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyResult {
    pub table: RejectionTable,
    pub trace: Vec<TraceRow>,
}

impl StudyResult {
    /// Finite-or-infinite statistics at parameter point `point`.
    pub fn statistics(&self, point: usize) -> Vec<f64> {
        self.trace.iter().filter(|t| t.point == point).filter_map(|t| t.statistic).collect()
    }
}

/// Runs every replication at every parameter point and aggregates.
pub fn run_study(cfg: &SimConfig) -> Result<StudyResult, SimError> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.points.len()).flat_map(|k| (0..cfg.n_reps).map(move |r| (k, r))).collect();
    let trace: Vec<TraceRow> = jobs
        .par_iter()
        .map(|&(k, rep)| {
            let p = cfg.points[k];
            let base = TraceRow {
                point: k,
                theta: p.theta,
                tau: p.tau,
                rep,
                seed: cfg.seed,
                statistic: None,
                dape: None,
                rejected: Vec::new(),
                decision: None,
                error: None,
            };
            match run_replication(cfg, p, rep) {
                Ok(o) => TraceRow { statistic: Some(o.statistic), dape: Some(o.dape), rejected: o.rejected, decision: Some(o.decision), ..base },
                Err(e) => TraceRow { error: Some(e), ..base },
            }
        })
        .collect();
    let mut rows = Vec::new();
    for (k, p) in cfg.points.iter().enumerate() {
        let reps: Vec<&TraceRow> = trace.iter().filter(|t| t.point == k).collect();
        let done: Vec<&TraceRow> = reps.iter().copied().filter(|t| t.error.is_none()).collect();
        let failures = reps.len() - done.len();
        let dapes: Vec<f64> = done.iter().filter_map(|t| t.dape).collect();
        let mean_dape = if dapes.is_empty() { f64::NAN } else { dapes.iter().sum::<f64>() / dapes.len() as f64 };
        let dape_sign = if mean_dape > 0.0 {
            1
        } else if mean_dape < 0.0 {
            -1
        } else {
            0
        };
        let agree = dapes.iter().filter(|&&d| (d > 0.0 && dape_sign > 0) || (d < 0.0 && dape_sign < 0) || (d == 0.0 && dape_sign == 0)).count();
        for (j, &alpha) in cfg.alphas.iter().enumerate() {
            let rejections = done.iter().filter(|t| t.rejected[j]).count();
            let rate = if done.is_empty() { f64::NAN } else { rejections as f64 / done.len() as f64 };
            rows.push(RejectionRow {
                example: cfg.example.to_string(),
                error_kind: cfg.error_kind.to_string(),
                theta: p.theta,
                tau: p.tau,
                n: cfg.n,
                workers: cfg.workers,
                alpha,
                reps: cfg.n_reps,
                completed: done.len(),
                failures,
                rejections,
                rate,
                mc_se: (rate * (1.0 - rate) / cfg.n_reps as f64).sqrt(),
                mean_dape,
                dape_sign,
                sign_agreement: if dapes.is_empty() { f64::NAN } else { agree as f64 / dapes.len() as f64 },
                valid: failures * 100 <= cfg.n_reps,
            });
        }
    }
    Ok(StudyResult { table: RejectionTable { generator: GENERATOR.into(), seed: cfg.seed, rows }, trace })
}

/// Rounds to 12 significant digits so that tables from runs that agree up to
/// rounding noise print identically.
fn round12(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().expect("formatted float parses")
}

impl RejectionRow {
    fn rounded(&self) -> Self {
        RejectionRow { mean_dape: round12(self.mean_dape), mc_se: round12(self.mc_se), ..self.clone() }
    }
}

pub fn write_table_csv(table: &RejectionTable, out: impl Write) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    for r in &table.rows {
        w.serialize(r.rounded())?;
    }
    w.flush()?;
    Ok(())
}

pub fn table_to_json(table: &RejectionTable) -> Result<String, SimError> {
    let rounded = RejectionTable { rows: table.rows.iter().map(RejectionRow::rounded).collect(), ..table.clone() };
    Ok(serde_json::to_string_pretty(&rounded)?)
}

#[derive(Serialize)]
struct FlatTrace<'a> {
    point: usize,
    theta: f64,
    tau: f64,
    rep: usize,
    seed: u64,
    statistic: Option<f64>,
    dape: Option<f64>,
    rejected: String,
    decision: Option<&'a str>,
    error: Option<&'a str>,
}

pub fn write_trace_csv(trace: &[TraceRow], out: impl Write) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    for t in trace {
        w.serialize(FlatTrace {
            point: t.point,
            theta: t.theta,
            tau: t.tau,
            rep: t.rep,
            seed: t.seed,
            statistic: t.statistic.map(round12),
            dape: t.dape.map(round12),
            rejected: t.rejected.iter().map(|&b| if b { "1" } else { "0" }).collect::<Vec<_>>().join(";"),
            decision: t.decision.as_deref(),
            error: t.error.as_deref(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Kolmogorov–Smirnov distance between a sample and the χ²₁ law; infinite
/// values sit at CDF 1.
pub fn ks_distance_chi2_1(sample: &[f64]) -> f64 {
    let mut s: Vec<f64> = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = if x.is_infinite() { 1.0 } else { chi2::chi2_1_cdf(x.max(0.0)).unwrap_or(f64::NAN) };
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Parses `"θ,τ;θ,τ;…"`; a bare number is read as `τ` with `θ = 0`.
pub fn parse_grid(s: &str) -> Result<Vec<ParamPoint>, SimError> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let nums = p
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| SimError::InvalidConfig(format!("bad grid point {p:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            match nums[..] {
                [tau] => Ok(ParamPoint { theta: 0.0, tau }),
                [theta, tau] => Ok(ParamPoint { theta, tau }),
                _ => Err(SimError::InvalidConfig(format!("bad grid point {p:?}"))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_formulas() {
        assert_eq!(example2_response(1.0, 1.0, 0.3, 0.0, 0.0, 0.0), 1.0);
        assert_eq!(example3_mean(0.0, 0.7, 0.0), 0.0);
        assert!((example4_response(0.4, 1.0, 0.0, 0.0) - 0.2).abs() < 1e-15);
        // the indicator switches at z = 0.5
        let jump = example2_mean(0.0, 1.0, 0.5 + 1e-12, 1.0, 0.0) - example2_mean(0.0, 1.0, 0.5, 1.0, 0.0);
        assert!((jump - 1.0).abs() < 1e-9);
    }

    #[test]
    fn covariate_correlation() {
        let mut rng = replication_rng(1, 0);
        let pairs: Vec<(f64, f64)> = (0..100_000).map(|_| correlated_normals(&mut rng)).collect();
        let n = pairs.len() as f64;
        let (ma, mb) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
        let cov = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
        let va = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
        let vb = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
        let r = cov / (va * vb).sqrt();
        assert!((r - 0.5).abs() < 0.01, "r = {r}");
        assert!((vb - 1.0).abs() < 0.02);
    }

    #[test]
    fn mixed_normal_variance() {
        let mut rng = replication_rng(2, 0);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| example3_error(ErrorKind::MixedNormal, 0.0, &mut rng)).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|e| (e - m).powi(2)).sum::<f64>() / n as f64;
        let want = 0.95 * 1.0 + 0.05 * 3.0f64.powi(2);
        assert!((v - want).abs() < 0.01, "variance {v} vs {want}");
    }

    #[test]
    fn conditional_t_is_heavy_tailed() {
        let mut rng = replication_rng(3, 0);
        let x2 = 1.2;
        let n = 400_000;
        let u: Vec<f64> = (0..n).map(|_| example3_error(ErrorKind::CondT6, x2, &mut rng) / x2.sin()).collect();
        let m = u.iter().sum::<f64>() / n as f64;
        let m2 = u.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
        let m4 = u.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n as f64;
        let kurt = m4 / (m2 * m2);
        // t(6) has variance 1.5 and kurtosis 6
        assert!(kurt.is_finite() && kurt > 3.0, "kurtosis {kurt}");
        assert!((m2 - 1.5).abs() < 0.05);
    }

    fn binned_variance(x: &[f64], y: &[f64], lo: f64, hi: f64, mean: impl Fn(usize) -> f64) -> f64 {
        let r: Vec<f64> = (0..x.len()).filter(|&i| x[i] >= lo && x[i] < hi).map(|i| y[i] - mean(i)).collect();
        r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
    }

    #[test]
    fn example2_conditional_variance() {
        let mut rng = replication_rng(4, 0);
        let d = gen_example2(100_000, 0.0, 0.0, &mut rng);
        let (x1, x2) = (&d.x[0], &d.x[1]);
        for (lo, hi) in [(-0.05, 0.05), (0.45, 0.55), (-1.05, -0.95)] {
            let v = binned_variance(x1, &d.y, lo, hi, |i| 0.5 * (x1[i] + x2[i]));
            let want = (PI * (lo + hi) / 2.0).sin().powi(2);
            assert!((v - want).abs() < 0.05 + 0.1 * want, "bin {lo}: {v} vs {want}");
        }
    }

    #[test]
    fn example4_conditional_variance() {
        let mut rng = replication_rng(5, 0);
        let d = gen_example4(100_000, 0.0, &mut rng);
        let x2 = &d.x[1];
        let v = binned_variance(x2, &d.y, 0.45, 0.55, |i| 0.1 * x2[i] * (1.0 + x2[i]));
        assert!((v - 1.0).abs() < 0.1, "{v}");
        let v0 = binned_variance(x2, &d.y, -0.03, 0.03, |i| 0.1 * x2[i] * (1.0 + x2[i]));
        assert!(v0 < 0.01);
    }

    #[test]
    fn example3_index_is_first_covariate() {
        let d = gen_example3(50, 0.1, ErrorKind::CondNormal, &mut replication_rng(6, 0));
        assert_eq!(d.z.as_ref().unwrap(), &d.x[0]);
    }

    #[test]
    fn ks_distance_oracle() {
        // quantiles at the midpoints of n equal cells give the minimal distance 1/(2n)
        let n = 50;
        let s: Vec<f64> = (0..n).map(|i| chi2::chi2_1_quantile((i as f64 + 0.5) / n as f64).unwrap()).collect();
        assert!((ks_distance_chi2_1(&s) - 0.5 / n as f64).abs() < 1e-9);
        assert!((ks_distance_chi2_1(&[f64::INFINITY]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0,0;0.05,0.1").unwrap(), vec![ParamPoint { theta: 0.0, tau: 0.0 }, ParamPoint { theta: 0.05, tau: 0.1 }]);
        assert_eq!(parse_grid("0.08").unwrap(), vec![ParamPoint { theta: 0.0, tau: 0.08 }]);
        assert!(parse_grid("a,b").is_err());
        assert!(parse_grid("1,2,3").is_err());
    }

    #[test]
    fn small_study_is_deterministic() {
        let mut cfg = SimConfig::new(Example::Ex2, vec![ParamPoint { theta: 0.0, tau: 0.0 }]);
        cfg.n = 120;
        cfg.n_reps = 3;
        let a = run_study(&cfg).unwrap();
        let b = run_study(&cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.table.rows, b.table.rows);
        let row = &a.table.rows[0];
        assert!(row.rate >= 0.0 && row.rate <= 1.0);
        assert!((row.mc_se - (row.rate * (1.0 - row.rate) / 3.0).sqrt()).abs() < 1e-15);
        let mut bad = cfg.clone();
        bad.alphas = vec![1.2];
        assert!(run_study(&bad).is_err());
    }
}
