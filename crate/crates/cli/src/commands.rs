use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use elr::data::{load_csv, rescale_unit_interval, CsvColumns, Dataset};
use elr::distributed::{
    distributed_quantile, distributed_test_variable, finish_from_stats, partition, verify_single_worker, DistError,
    DistributedConfig, DistributedTest, PartitionMap, SharedBasis, StatsEnvelope,
};
use elr::elr::ElrReport;
use elr::model::{compare, test_variable, ModelFit, ModelSpec, Selection};
use elr::sim::{parse_grid, run_study, table_to_json, write_table_csv, write_trace_csv, ErrorKind, Example, SimConfig};
use serde::{Deserialize, Serialize};

use crate::config::ResolvedConfig;
use crate::error::CliError;
use crate::report::{ModelSummary, RunReport, Timings};

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn parse_spec(s: &str) -> Result<ModelSpec, CliError> {
    s.parse::<ModelSpec>().map_err(|e| CliError::model("parse model", e))
}

fn load(r: &ResolvedConfig) -> Result<Dataset<f64>, CliError> {
    let columns = CsvColumns {
        response: r.response()?.to_string(),
        index: r.index_var.clone(),
        covariates: r.covariates.clone(),
    };
    load_csv(r.data_path()?, &columns).map_err(CliError::load)
}

fn kind(spec: &ModelSpec) -> String {
    if spec.is_additive() { "additive" } else { "varycoef" }.to_string()
}

fn summary(role: &str, fit: &ModelFit<f64>, grid: Vec<elr::model::GridRow>) -> ModelSummary {
    let spec = match fit.drop {
        Some(l) => without(&fit.spec, l),
        None => fit.spec.clone(),
    };
    ModelSummary {
        role: role.into(),
        spec: spec.to_string(),
        kind: kind(&spec),
        q: drop_index(&fit.q, fit.drop),
        kappa: fit.kappa,
        ape: fit.ape(),
        ape_adj: Some(fit.ape_adj),
        grid,
    }
}

fn selection_summary(role: &str, s: &Selection<f64>) -> ModelSummary {
    summary(role, &s.best, s.table.clone())
}

fn drop_index(q: &[usize], drop: Option<usize>) -> Vec<usize> {
    q.iter().enumerate().filter(|&(j, _)| Some(j) != drop).map(|(_, &v)| v).collect()
}

/// The additive model without term `l`.
fn without(spec: &ModelSpec, l: usize) -> ModelSpec {
    match spec {
        ModelSpec::Additive { terms } => ModelSpec::Additive {
            terms: terms.iter().enumerate().filter(|&(j, _)| j != l).map(|(_, t)| t.clone()).collect(),
        },
        other => other.clone(),
    }
}

fn adjusted(ape: f64, n: usize, kappa: usize) -> Option<f64> {
    (kappa < n).then(|| ape * n as f64 / (n - kappa) as f64)
}

fn log_skipped(label: &str, table: &[elr::model::GridRow]) {
    for row in table {
        if let Some(e) = &row.error {
            eprintln!("note: {label}: skipped q = {:?}: {e}", row.q);
        }
    }
}

pub fn cmd_compare(r: ResolvedConfig) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let cfg = r.pipeline()?;
    let a = parse_spec(r.model_a.as_deref().ok_or_else(|| CliError::usage("config", "--model-a is required"))?)?;
    let b = parse_spec(r.model_b.as_deref().ok_or_else(|| CliError::usage("config", "--model-b is required"))?)?;
    if (!a.is_additive() || !b.is_additive()) && r.index_var.is_none() {
        return Err(CliError::usage("config", "a varying-coefficient model needs --index-var"));
    }
    let raw = load(&r)?;
    let d = rescale_unit_interval(&raw).map_err(|e| CliError::data("rescale", e))?;
    let load_ms = ms(start);
    let fit_start = Instant::now();
    let c = compare(&d, &a, &b, &cfg).map_err(|e| CliError::model("compare", e))?;
    let fit_ms = ms(fit_start);
    log_skipped("model a", &c.a.table);
    log_skipped("model b", &c.b.table);
    let models = vec![selection_summary("a", &c.a), selection_summary("b", &c.b)];
    let mut report = RunReport::new("compare", r, models, &c.report, 1);
    report.timings = Timings { load_ms, fit_ms, total_ms: ms(start) };
    Ok(report)
}

fn agree(a: &ElrReport<f64>, b: &ElrReport<f64>) -> bool {
    let (x, y) = (a.statistic, b.statistic);
    let close = (x.is_infinite() && y.is_infinite()) || (x - y).abs() <= 1e-8 * x.abs().max(1.0);
    close && a.decision == b.decision
}

fn sharded_summaries(t: &DistributedTest<f64>, n: usize) -> Vec<ModelSummary> {
    let reduced = without(&t.spec, t.drop);
    vec![
        ModelSummary {
            role: "reduced".into(),
            kind: kind(&reduced),
            spec: reduced.to_string(),
            q: drop_index(&t.q, Some(t.drop)),
            kappa: t.kappa_drop,
            ape: t.ape_drop,
            ape_adj: adjusted(t.ape_drop, n, t.kappa_drop),
            grid: Vec::new(),
        },
        ModelSummary {
            role: "full".into(),
            kind: kind(&t.spec),
            spec: t.spec.to_string(),
            q: t.q.clone(),
            kappa: t.kappa_full,
            ape: t.ape_full,
            ape_adj: adjusted(t.ape_full, n, t.kappa_full),
            grid: t.table.clone(),
        },
    ]
}

fn shadow_check(raw: &Dataset<f64>, t: &DistributedTest<f64>, r: &ResolvedConfig) -> Result<bool, CliError> {
    let cfg = r.pipeline()?;
    let check = verify_single_worker(raw, t, &cfg).map_err(|e| CliError::dist("verify", e))?;
    eprintln!(
        "verify: {} workers, statistic {} vs single-machine {} (difference {:e}, largest score difference {:e}): {}",
        t.partition.workers(),
        t.report.statistic,
        check.statistic,
        check.difference,
        check.score_difference,
        if check.matches { "match" } else { "MISMATCH" }
    );
    Ok(check.matches)
}

/// Written next to the per-worker envelopes by `--emit-shards`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardManifest {
    pub format: String,
    pub version: u32,
    pub workers: usize,
    pub seed: u64,
    pub rows: usize,
    pub spec: String,
    pub column: String,
    pub drop: usize,
    pub q: Vec<usize>,
    pub kappa_full: usize,
    pub kappa_drop: usize,
    pub files: Vec<String>,
}

const MANIFEST_FORMAT: &str = "elr-shard-manifest";

fn worker_file(k: usize) -> String {
    format!("worker-{k}.json")
}

fn emit_shards(dir: &Path, raw: &Dataset<f64>, t: &DistributedTest<f64>, seed: u64) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::data("emit shards", format!("{}: {e}", dir.display()));
    let dist = |e: DistError| CliError::dist("emit shards", e);
    fs::create_dir_all(dir).map_err(io)?;
    let (_, shards) = partition(raw, t.partition.workers(), seed).map_err(dist)?;
    let ModelSpec::Additive { terms } = &t.spec else {
        return Err(CliError::usage("emit shards", "sharded tests need an additive model"));
    };
    let columns = terms.iter().map(|t| t.column.clone()).collect();
    let basis = SharedBasis::build(&shards, columns, &t.specs, Some(t.drop)).map_err(dist)?;
    let mut files = Vec::new();
    for s in &t.stats {
        let name = worker_file(s.worker_id);
        fs::write(dir.join(&name), StatsEnvelope::new(s, &basis).to_json().map_err(dist)?).map_err(io)?;
        files.push(name);
    }
    let manifest = ShardManifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        workers: t.partition.workers(),
        seed,
        rows: raw.n(),
        spec: t.spec.to_string(),
        column: t.column.clone(),
        drop: t.drop,
        q: t.q.clone(),
        kappa_full: t.kappa_full,
        kappa_drop: t.kappa_drop,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::data("emit shards", e))?;
    fs::write(dir.join("manifest.json"), text).map_err(io)?;
    eprintln!("wrote {} worker envelopes to {}", manifest.workers, dir.display());
    Ok(())
}

fn same_basis(a: &StatsEnvelope, b: &StatsEnvelope) -> bool {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.columns == b.columns
        && a.drop == b.drop
        && a.order == b.order
        && a.knots == b.knots
        && a.y_bar.to_bits() == b.y_bar.to_bits()
        && bits(&a.column_means) == bits(&b.column_means)
}

/// Finishes a variable test from envelopes written by `--emit-shards`; the
/// data are re-partitioned with the recorded seed for the score round.
fn from_shards(dir: &Path, raw: &Dataset<f64>, r: &ResolvedConfig) -> Result<(Vec<ModelSummary>, ElrReport<f64>, usize), CliError> {
    let stage = "read shards";
    let read = |name: &str| {
        fs::read_to_string(dir.join(name)).map_err(|e| CliError::data(stage, format!("{}: {e}", dir.join(name).display())))
    };
    let manifest: ShardManifest = serde_json::from_str(&read("manifest.json")?).map_err(|e| CliError::data(stage, e))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
        return Err(CliError::data(stage, format!("unsupported manifest {} v{}", manifest.format, manifest.version)));
    }
    if manifest.rows != raw.n() {
        return Err(CliError::data(stage, format!("manifest covers {} rows, data has {}", manifest.rows, raw.n())));
    }
    if let Some(col) = &r.drop_var {
        if col != &manifest.column {
            return Err(CliError::usage(stage, format!("--drop-var {col} but the envelopes test {}", manifest.column)));
        }
    }
    let envelopes = manifest
        .files
        .iter()
        .map(|f| StatsEnvelope::from_json(&read(f)?).map_err(|e| CliError::dist(stage, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let first = envelopes.first().ok_or_else(|| CliError::data(stage, "manifest lists no workers"))?;
    if envelopes.iter().any(|e| !same_basis(e, first)) {
        return Err(CliError::data(stage, "worker envelopes were built with different bases"));
    }
    let basis = first.basis::<f64>().map_err(|e| CliError::dist(stage, e))?;
    let stats: Vec<_> = envelopes.iter().map(StatsEnvelope::stats::<f64>).collect();
    let (map, shards) = partition(raw, manifest.workers, manifest.seed).map_err(|e| CliError::dist("partition", e))?;
    for s in &stats {
        let expected = map.sizes().get(s.worker_id).copied();
        if expected != Some(s.rows) {
            return Err(CliError::data(stage, format!("worker {} holds {} rows, partition gives {expected:?}", s.worker_id, s.rows)));
        }
    }
    let cfg = r.pipeline()?;
    let (errors, report) = finish_from_stats(&shards, &basis, &stats, &cfg).map_err(|e| CliError::dist("variable test", e))?;
    let n = raw.n();
    // per-worker partial sums, then across workers, as the engine does
    let mean_sq = |v: &[Vec<f64>]| v.iter().map(|p| p.iter().map(|e| e * e).sum::<f64>()).fold(0.0, |a, b| a + b) / n as f64;
    let (ape_full, ape_drop) = (mean_sq(&errors.full), mean_sq(&errors.drop));
    let spec = parse_spec(&manifest.spec)?;
    let reduced = without(&spec, manifest.drop);
    let models = vec![
        ModelSummary {
            role: "reduced".into(),
            kind: kind(&reduced),
            spec: reduced.to_string(),
            q: drop_index(&manifest.q, Some(manifest.drop)),
            kappa: manifest.kappa_drop,
            ape: ape_drop,
            ape_adj: adjusted(ape_drop, n, manifest.kappa_drop),
            grid: Vec::new(),
        },
        ModelSummary {
            role: "full".into(),
            kind: kind(&spec),
            spec: spec.to_string(),
            q: manifest.q.clone(),
            kappa: manifest.kappa_full,
            ape: ape_full,
            ape_adj: adjusted(ape_full, n, manifest.kappa_full),
            grid: Vec::new(),
        },
    ];
    Ok((models, report, manifest.workers))
}

pub fn cmd_test_var(r: ResolvedConfig) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let cfg = r.pipeline()?;
    let column = r.drop_var.clone().ok_or_else(|| CliError::usage("config", "--drop-var is required"))?;
    let spec = parse_spec(r.model.as_deref().unwrap_or("additive"))?;
    if !spec.is_additive() {
        return Err(CliError::usage("config", "test-var needs an additive model"));
    }
    if r.workers == 0 {
        return Err(CliError::usage("config", "--workers must be at least 1"));
    }
    if r.emit_shards.is_some() && r.from_shards.is_some() {
        return Err(CliError::usage("config", "--emit-shards and --from-shards are exclusive"));
    }
    let raw = load(&r)?;
    let load_ms = ms(start);
    let fit_start = Instant::now();
    let dcfg = DistributedConfig { workers: r.workers, seed: r.seed };
    let sharded = |stage| distributed_test_variable(&raw, &spec, &column, &cfg, &dcfg).map_err(|e| CliError::dist(stage, e));

    let (models, elr_report, workers, matches) = if let Some(dir) = &r.from_shards {
        let (models, report, workers) = from_shards(Path::new(dir), &raw, &r)?;
        (models, report, workers, None)
    } else if r.workers == 1 && r.emit_shards.is_none() {
        let d = rescale_unit_interval(&raw).map_err(|e| CliError::data("rescale", e))?;
        let t = test_variable(&d, &spec, &column, &cfg).map_err(|e| CliError::model("variable test", e))?;
        log_skipped("full model", &t.selection.table);
        let matches = if r.verify {
            let shadow = sharded("verify")?;
            Some(shadow_check(&raw, &shadow, &r)? && agree(&shadow.report, &t.report))
        } else {
            None
        };
        let models = vec![summary("reduced", &t.dropped, Vec::new()), selection_summary("full", &t.selection)];
        (models, t.report, 1, matches)
    } else {
        let t = sharded("variable test")?;
        log_skipped("full model", &t.table);
        if let Some(dir) = &r.emit_shards {
            emit_shards(&PathBuf::from(dir), &raw, &t, r.seed)?;
        }
        let matches = if r.verify { Some(shadow_check(&raw, &t, &r)?) } else { None };
        (sharded_summaries(&t, raw.n()), t.report.clone(), r.workers, matches)
    };
    let fit_ms = ms(fit_start);
    let mut report = RunReport::new("test-var", r, models, &elr_report, workers);
    report.distributed_matches_full = matches;
    report.timings = Timings { load_ms, fit_ms, total_ms: ms(start) };
    Ok(report)
}

pub struct QuantileArgs {
    pub data: PathBuf,
    pub column: String,
    pub q: f64,
    pub workers: usize,
    pub seed: u64,
}

/// Sample quantile of one column computed over `workers` shards.
pub fn cmd_quantile(a: &QuantileArgs) -> Result<f64, CliError> {
    let columns = CsvColumns { response: a.column.clone(), index: None, covariates: Some(Vec::new()) };
    let d: Dataset<f64> = load_csv(&a.data, &columns).map_err(CliError::load)?;
    let map = PartitionMap::random(d.n(), a.workers, a.seed).map_err(|e| CliError::dist("partition", e))?;
    let shards: Vec<Vec<f64>> = (0..map.workers()).map(|k| map.rows(k).iter().map(|&i| d.y[i]).collect()).collect();
    let refs: Vec<&[f64]> = shards.iter().map(Vec::as_slice).collect();
    distributed_quantile(&refs, a.q, a.seed).map_err(|e| CliError::dist("quantile", e))
}

pub struct SimulateArgs {
    pub example: Example,
    pub grid: Option<String>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub alphas: Option<Vec<f64>>,
    pub seed: u64,
    pub paper_scale: bool,
    pub workers: usize,
    pub error_kind: ErrorKind,
    pub out_dir: Option<PathBuf>,
}

/// Runs a study and writes `table.csv`, `table.json` and `trace.csv` to the
/// output directory, or the table as CSV to stdout without one.
pub fn cmd_simulate(a: &SimulateArgs, r: &ResolvedConfig) -> Result<(), CliError> {
    let usage = |e| CliError::sim("simulate", e);
    let default_grid = if a.example == Example::Ex2 { "0,0" } else { "0" };
    let points = parse_grid(a.grid.as_deref().unwrap_or(default_grid)).map_err(usage)?;
    let mut cfg = SimConfig::new(a.example, points);
    if a.paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(reps) = a.reps {
        cfg.n_reps = reps;
    }
    if let Some(alphas) = &a.alphas {
        cfg.alphas = alphas.clone();
    }
    cfg.seed = a.seed;
    cfg.workers = a.workers;
    cfg.error_kind = a.error_kind;
    cfg.pipeline = r.pipeline()?;
    cfg.validate().map_err(usage)?;
    let start = Instant::now();
    let study = run_study(&cfg).map_err(usage)?;
    eprintln!(
        "example {}: {} points x {} replications in {:.1} s",
        cfg.example,
        cfg.points.len(),
        cfg.n_reps,
        start.elapsed().as_secs_f64()
    );
    if !study.table.is_valid() {
        eprintln!("warning: more than 1% of replications failed at some point; see the failures column");
    }
    let write = |e| CliError::sim("write tables", e);
    match &a.out_dir {
        Some(dir) => {
            let io = |e: std::io::Error| CliError::data("write tables", format!("{}: {e}", dir.display()));
            fs::create_dir_all(dir).map_err(io)?;
            write_table_csv(&study.table, fs::File::create(dir.join("table.csv")).map_err(io)?).map_err(write)?;
            fs::write(dir.join("table.json"), table_to_json(&study.table).map_err(write)?).map_err(io)?;
            write_trace_csv(&study.trace, fs::File::create(dir.join("trace.csv")).map_err(io)?).map_err(write)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_table_csv(&study.table, &mut lock).map_err(write)?;
            lock.flush().map_err(|e| CliError::data("write tables", e))?;
        }
    }
    Ok(())
}
