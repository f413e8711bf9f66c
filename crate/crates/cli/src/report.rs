use elr::elr::{Decision, ElrReport, VariableVerdict};
use elr::model::GridRow;
use elr::root::StopReason;
use serde::{Deserialize, Serialize};

use crate::config::ResolvedConfig;

/// Bumped with any change to the report fields.
pub const SCHEMA_VERSION: u32 = 1;

pub const SCHEMA: &str = include_str!("../schema/run_report.schema.json");

/// Output of `compare` and `test-var`.
///
/// Floats are written with the shortest decimal form that parses back to the
/// same bits, so a report read back compares equal to the one written. An
/// infinite statistic is written as the string `"+inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub version: String,
    pub command: String,
    pub config: ResolvedConfig,
    /// Model `a` first, then model `b`. For `test-var`, `a` is the reduced model.
    pub models: Vec<ModelSummary>,
    pub ape_a: f64,
    pub ape_b: f64,
    pub dape: f64,
    #[serde(with = "extended_float")]
    pub statistic: f64,
    pub multiplier: Option<f64>,
    pub p_value: f64,
    pub feasible: bool,
    pub alpha: f64,
    pub critical_value: f64,
    pub decision: Decision,
    pub verdict: Option<VariableVerdict>,
    pub iterations: usize,
    pub stop: Option<String>,
    pub n: usize,
    pub workers: usize,
    pub seed: u64,
    pub distributed_matches_full: Option<bool>,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSummary {
    pub role: String,
    pub spec: String,
    pub kind: String,
    /// Interior knots per component; 0 for linear terms.
    pub q: Vec<usize>,
    pub kappa: usize,
    pub ape: f64,
    pub ape_adj: Option<f64>,
    pub grid: Vec<GridRow>,
}

/// Wall-clock milliseconds per stage. The only part of a report that
/// changes between identical runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timings {
    pub load_ms: f64,
    pub fit_ms: f64,
    pub total_ms: f64,
}

fn stop_name(s: StopReason) -> String {
    match s {
        StopReason::Residual => "residual".into(),
        StopReason::Step => "step".into(),
    }
}

pub fn exit_code(d: Decision) -> i32 {
    match d {
        Decision::Equivalent => 0,
        Decision::PreferA => 10,
        Decision::PreferB => 11,
        Decision::TieBreakUndefined => 12,
    }
}

impl RunReport {
    pub fn new(command: &str, config: ResolvedConfig, models: Vec<ModelSummary>, r: &ElrReport<f64>, workers: usize) -> Self {
        let (ape_a, ape_b) = (models[0].ape, models[1].ape);
        let verdict = (command == "test-var").then(|| r.variable_verdict());
        RunReport {
            schema_version: SCHEMA_VERSION,
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.seed,
            config,
            models,
            ape_a,
            ape_b,
            dape: r.dape,
            statistic: r.statistic,
            multiplier: r.multiplier,
            p_value: r.p_value,
            feasible: r.feasible,
            alpha: r.alpha,
            critical_value: r.critical_value,
            decision: r.decision,
            verdict,
            iterations: r.iterations,
            stop: r.stop.map(stop_name),
            n: r.n,
            workers,
            distributed_matches_full: None,
            timings: Timings::default(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        exit_code(self.decision)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    #[cfg(test)]
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// `+∞` as `"+inf"`, finite values as plain numbers.
mod extended_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *x == f64::INFINITY {
            s.serialize_str("+inf")
        } else {
            s.serialize_f64(*x)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if t == "+inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(de::Error::custom(format!("expected a number or \"+inf\", got {t:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use elr::model::Placement;

    fn sample(statistic: f64) -> RunReport {
        let config = ResolvedConfig {
            config_file: None,
            data: Some("d.csv".into()),
            response: Some("y".into()),
            index_var: Some("z".into()),
            covariates: None,
            model_a: Some("additive".into()),
            model_b: Some("varycoef".into()),
            model: None,
            drop_var: None,
            alpha: 0.05,
            knots: Placement::Quantile,
            order: 4,
            q_grid: None,
            seed: 7,
            workers: 1,
            verify: false,
            emit_shards: None,
            from_shards: None,
            threads: 0,
        };
        let model = |role: &str, ape: f64| ModelSummary {
            role: role.into(),
            spec: "additive:x1,x2".into(),
            kind: "additive".into(),
            q: vec![2, 3],
            kappa: 11,
            ape,
            ape_adj: Some(ape * 1.01),
            grid: vec![GridRow { q: vec![2, 3], kappa: Some(11), ape: Some(ape), ape_adj: None, error: None }],
        };
        RunReport {
            schema_version: SCHEMA_VERSION,
            version: "0.1.0".into(),
            command: "compare".into(),
            config,
            models: vec![model("a", 0.1 + 0.2), model("b", 1.0 / 3.0)],
            ape_a: 0.1 + 0.2,
            ape_b: 1.0 / 3.0,
            dape: 0.1 + 0.2 - 1.0 / 3.0,
            statistic,
            multiplier: Some(-2.0e-17),
            p_value: 0.123_456_789_012_345_67,
            feasible: statistic.is_finite(),
            alpha: 0.05,
            critical_value: 3.841_458_820_694_124,
            decision: Decision::PreferA,
            verdict: None,
            iterations: 5,
            stop: Some("residual".into()),
            n: 506,
            workers: 1,
            seed: 7,
            distributed_matches_full: Some(true),
            timings: Timings { load_ms: 1.5, fit_ms: 20.25, total_ms: 22.0 },
        }
    }

    #[test]
    fn report_round_trips_bit_exactly() {
        for stat in [19.330_000_000_000_002, f64::INFINITY, 0.0, 5e-324] {
            let r = sample(stat);
            let back = RunReport::from_json(&r.to_json().unwrap()).unwrap();
            assert_eq!(back, r);
            assert_eq!(back.statistic.to_bits(), r.statistic.to_bits());
            assert_eq!(back.dape.to_bits(), r.dape.to_bits());
        }
        assert!(sample(f64::INFINITY).to_json().unwrap().contains("\"statistic\": \"+inf\""));
    }

    #[test]
    fn unknown_statistic_strings_are_rejected() {
        let text = sample(1.0).to_json().unwrap().replace("\"statistic\": 1.0", "\"statistic\": \"big\"");
        assert!(RunReport::from_json(&text).is_err());
    }

    #[test]
    fn decisions_map_to_exit_codes() {
        assert_eq!(exit_code(Decision::Equivalent), 0);
        assert_eq!(exit_code(Decision::PreferA), 10);
        assert_eq!(exit_code(Decision::PreferB), 11);
        assert_eq!(exit_code(Decision::TieBreakUndefined), 12);
    }
}
