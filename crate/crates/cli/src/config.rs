//! Flag, config-file and default resolution. Flags win over the file, the
//! file wins over built-in defaults.

use std::path::{Path, PathBuf};

use elr::model::{KnotConfig, Placement, PipelineConfig, QGrid};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 20_240_611;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_ORDER: usize = 4;

/// Optional settings read from a `--config` TOML file. Keys mirror the long
/// flag names with dashes replaced by underscores.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub response: Option<String>,
    pub index_var: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub model_a: Option<String>,
    pub model_b: Option<String>,
    pub model: Option<String>,
    pub drop_var: Option<String>,
    pub column: Option<String>,
    pub alpha: Option<f64>,
    pub knots: Option<Placement>,
    pub order: Option<usize>,
    pub q_grid: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub example: Option<String>,
    pub grid: Option<String>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub alpha_list: Option<Vec<f64>>,
    pub error_kind: Option<String>,
    pub paper_scale: Option<bool>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage("config", format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage("config", format!("{}: {e}", path.display())))
    }
}

/// Settings after precedence has been applied; echoed in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub config_file: Option<String>,
    pub data: Option<String>,
    pub response: Option<String>,
    pub index_var: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub model_a: Option<String>,
    pub model_b: Option<String>,
    pub model: Option<String>,
    pub drop_var: Option<String>,
    pub alpha: f64,
    pub knots: Placement,
    pub order: usize,
    pub q_grid: Option<String>,
    pub seed: u64,
    pub workers: usize,
    pub verify: bool,
    pub emit_shards: Option<String>,
    pub from_shards: Option<String>,
    /// Worker threads from `ELR_THREADS`; 0 lets rayon decide.
    pub threads: usize,
}

impl ResolvedConfig {
    pub fn pipeline(&self) -> Result<PipelineConfig<f64>, CliError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::usage("config", format!("--alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(1..=10).contains(&self.order) {
            return Err(CliError::usage("config", format!("--order must be between 1 and 10, got {}", self.order)));
        }
        let grid = self.q_grid.as_deref().map(parse_q_grid).transpose()?;
        Ok(PipelineConfig {
            knots: KnotConfig { order: self.order, placement: self.knots, grid },
            alpha: self.alpha,
            ..PipelineConfig::default()
        })
    }

    pub fn data_path(&self) -> Result<&str, CliError> {
        self.data.as_deref().ok_or_else(|| CliError::usage("config", "--data is required"))
    }

    pub fn response(&self) -> Result<&str, CliError> {
        self.response.as_deref().ok_or_else(|| CliError::usage("config", "--response is required"))
    }
}

fn parse_counts(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::usage("config", format!("bad knot-count list {s:?}"));
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match item.split_once("..") {
            Some((lo, hi)) => {
                let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(bad());
                }
                out.extend(lo..=hi);
            }
            None => out.push(item.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// `"1,2,3"` or `"1..4"` shares the counts across components;
/// `"1,2;0;2..5"` gives one list per component in design order.
pub fn parse_q_grid(s: &str) -> Result<QGrid, CliError> {
    let parts: Vec<&str> = s.split(';').collect();
    if parts.len() == 1 {
        Ok(QGrid::Shared(parse_counts(parts[0])?))
    } else {
        Ok(QGrid::PerComponent(parts.into_iter().map(parse_counts).collect::<Result<_, _>>()?))
    }
}

/// Number of rayon threads requested through `ELR_THREADS`.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("ELR_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage("config", format!("ELR_THREADS must be a non-negative integer, got {v:?}"))),
        _ => Ok(0),
    }
}
