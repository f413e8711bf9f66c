//! `elr`: empirical-likelihood-ratio model comparison from the command line.
//!
//! The JSON report goes to stdout (or `--out`); everything else goes to
//! stderr. Exit codes: 0 equivalent, 10 prefer model a, 11 prefer model b,
//! 12 rejection with zero APE difference, 2 usage error, 3 data error,
//! 4 numerical error.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elr::model::Placement;
use elr::sim::{ErrorKind, Example};

use crate::commands::{QuantileArgs, SimulateArgs};
use crate::config::{threads_from_env, FileConfig, ResolvedConfig, DEFAULT_ALPHA, DEFAULT_ORDER, DEFAULT_SEED};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "elr", version, about = "Empirical likelihood ratio tests for nonparametric regression models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare two models fitted to the same data.
    Compare(CompareArgs),
    /// Test whether one component of an additive model can be dropped.
    TestVar(TestVarArgs),
    /// Sample quantile of one column, computed over shards.
    Quantile(QuantileCmd),
    /// Run a size and power study.
    Simulate(SimulateCmd),
    /// Print the JSON schema of the run report.
    Schema,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    response: Option<String>,
    /// Index variable of varying-coefficient models.
    #[arg(long = "index-var")]
    index_var: Option<String>,
    /// Covariates to load, comma separated; default is every other column.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
}

#[derive(Args, Clone, Default)]
struct FitArgs {
    #[arg(long)]
    alpha: Option<f64>,
    /// Knot placement.
    #[arg(long)]
    knots: Option<Placement>,
    /// Spline order (4 is cubic).
    #[arg(long)]
    order: Option<usize>,
    /// Interior-knot counts: "1,2,3", "1..5", or per component "1,2;3;2..4".
    #[arg(long = "q-grid")]
    q_grid: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with defaults for any of the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model a: "additive", "varycoef", or a term list such as "additive:x1,lin(x2)".
    #[arg(long = "model-a")]
    model_a: Option<String>,
    #[arg(long = "model-b")]
    model_b: Option<String>,
    #[command(flatten)]
    fit: FitArgs,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TestVarArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Additive model; default uses every covariate.
    #[arg(long)]
    model: Option<String>,
    /// Covariate whose component is tested.
    #[arg(long = "drop-var")]
    drop_var: Option<String>,
    /// Number of shards; 1 runs the single-machine path.
    #[arg(long)]
    workers: Option<usize>,
    /// Also run the single-machine path and record whether both agree.
    #[arg(long)]
    verify: bool,
    /// Write per-worker statistics envelopes and a manifest to this directory.
    #[arg(long = "emit-shards")]
    emit_shards: Option<PathBuf>,
    /// Finish the test from envelopes written by --emit-shards.
    #[arg(long = "from-shards")]
    from_shards: Option<PathBuf>,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantileCmd {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    column: Option<String>,
    /// Level in [0, 1].
    #[arg(long)]
    q: f64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateCmd {
    /// Study design: 2, 3 or 4.
    #[arg(long)]
    example: Option<String>,
    /// Parameter points "theta,tau;theta,tau"; a bare number is tau.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long = "alpha-list", value_delimiter = ',')]
    alpha_list: Option<Vec<f64>>,
    /// Sample sizes and replication counts of the published studies.
    #[arg(long = "paper-scale")]
    paper_scale: bool,
    /// Shards for example 4.
    #[arg(long)]
    workers: Option<usize>,
    /// normal, cond_normal, cond_t6 or mixed_normal.
    #[arg(long = "error-kind")]
    error_kind: Option<String>,
    /// Directory for table.csv, table.json and trace.csv; stdout gets the CSV table otherwise.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    knots: Option<Placement>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long = "q-grid")]
    q_grid: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

/// Applies flag > file > default precedence to the settings shared by the
/// model commands.
fn resolve(data: DataArgs, fit: FitArgs, file: &FileConfig, threads: usize) -> ResolvedConfig {
    ResolvedConfig {
        config_file: path_str(fit.config),
        data: path_str(data.data.or_else(|| file.data.clone())),
        response: data.response.or_else(|| file.response.clone()),
        index_var: data.index_var.or_else(|| file.index_var.clone()),
        covariates: data.covariates.or_else(|| file.covariates.clone()),
        model_a: None,
        model_b: None,
        model: None,
        drop_var: None,
        alpha: fit.alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA),
        knots: fit.knots.or(file.knots).unwrap_or_default(),
        order: fit.order.or(file.order).unwrap_or(DEFAULT_ORDER),
        q_grid: fit.q_grid.or_else(|| file.q_grid.clone()),
        seed: fit.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        workers: file.workers.unwrap_or(1),
        verify: false,
        emit_shards: None,
        from_shards: None,
        threads,
    }
}

fn write_report(report: &report::RunReport, out: Option<PathBuf>) -> Result<(), CliError> {
    let text = report.to_json().map_err(|e| CliError::data("write report", e))?;
    match out {
        Some(path) => std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::data("write report", format!("{}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli, threads: usize) -> Result<i32, CliError> {
    match cli.command {
        Command::Compare(a) => {
            let file = FileConfig::load(a.fit.config.as_deref())?;
            let mut r = resolve(a.data, a.fit, &file, threads);
            r.model_a = a.model_a.or_else(|| file.model_a.clone());
            r.model_b = a.model_b.or_else(|| file.model_b.clone());
            let report = commands::cmd_compare(r)?;
            eprintln!("{:?}: statistic {}, p-value {:.4}", report.decision, report.statistic, report.p_value);
            write_report(&report, a.out)?;
            Ok(report.exit_code())
        }
        Command::TestVar(a) => {
            let file = FileConfig::load(a.fit.config.as_deref())?;
            let mut r = resolve(a.data, a.fit, &file, threads);
            r.model = a.model.or_else(|| file.model.clone());
            r.drop_var = a.drop_var.or_else(|| file.drop_var.clone());
            r.workers = a.workers.unwrap_or(r.workers);
            r.verify = a.verify;
            r.emit_shards = path_str(a.emit_shards);
            r.from_shards = path_str(a.from_shards);
            let report = commands::cmd_test_var(r)?;
            eprintln!(
                "{:?} ({:?}): statistic {}, p-value {:.4}",
                report.verdict.expect("test-var sets a verdict"),
                report.decision,
                report.statistic,
                report.p_value
            );
            write_report(&report, a.out)?;
            Ok(report.exit_code())
        }
        Command::Quantile(a) => {
            let file = FileConfig::load(a.config.as_deref())?;
            let args = QuantileArgs {
                data: a.data.or(file.data).ok_or_else(|| CliError::usage("config", "--data is required"))?,
                column: a.column.or(file.column).ok_or_else(|| CliError::usage("config", "--column is required"))?,
                q: a.q,
                workers: a.workers.or(file.workers).unwrap_or(1),
                seed: a.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            };
            println!("{}", commands::cmd_quantile(&args)?);
            Ok(0)
        }
        Command::Simulate(a) => {
            let file = FileConfig::load(a.config.as_deref())?;
            let example: Example = a
                .example
                .or(file.example.clone())
                .ok_or_else(|| CliError::usage("config", "--example is required"))?
                .parse()
                .map_err(|e| CliError::sim("config", e))?;
            let error_kind: ErrorKind = match a.error_kind.or(file.error_kind.clone()) {
                Some(s) => s.parse().map_err(|e| CliError::sim("config", e))?,
                None => ErrorKind::default(),
            };
            let fit = FitArgs { alpha: None, knots: a.knots, order: a.order, q_grid: a.q_grid, seed: a.seed, config: a.config };
            let r = resolve(DataArgs::default(), fit, &file, threads);
            let args = SimulateArgs {
                example,
                grid: a.grid.or(file.grid.clone()),
                n: a.n.or(file.n),
                reps: a.reps.or(file.reps),
                alphas: a.alpha_list.or(file.alpha_list.clone()),
                seed: r.seed,
                paper_scale: a.paper_scale || file.paper_scale.unwrap_or(false),
                workers: a.workers.or(file.workers).unwrap_or(1),
                error_kind,
                out_dir: a.out_dir,
            };
            commands::cmd_simulate(&args, &r)?;
            Ok(0)
        }
        Command::Schema => {
            print!("{}", report::SCHEMA);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = threads_from_env().and_then(|threads| {
        if threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .map_err(|e| CliError::usage("config", format!("cannot build thread pool: {e}")))?;
        }
        run(cli, threads)
    });
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
