use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_elr");

fn boston() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/boston.csv")
}

fn schema_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/run_report.schema.json")
}

fn elr(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("ELR_THREADS").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn report(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("stdout is not a report ({e}): {}", stderr(o)))
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

/// Deterministic low-discrepancy covariates.
fn design(n: usize, f: impl Fn(f64, f64, usize) -> f64) -> String {
    let mut s = String::from("y,x1,x2\n");
    for i in 0..n {
        let x1 = (i as f64 * 0.618_033_988_749_894_9) % 1.0;
        let x2 = (i as f64 * 0.414_213_562_373_095 + 0.1) % 1.0;
        s.push_str(&format!("{:?},{x1:?},{x2:?}\n", f(x1, x2, i)));
    }
    s
}

/// Validates `v` against the subset of JSON Schema used by the shipped file.
fn validate(root: &Value, schema: &Value, v: &Value, path: &str, errs: &mut Vec<String>) {
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        let name = r.trim_start_matches("#/$defs/");
        return validate(root, &root["$defs"][name], v, path, errs);
    }
    if let Some(c) = schema.get("const") {
        if c != v {
            errs.push(format!("{path}: expected {c}, got {v}"));
        }
    }
    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if !options.contains(v) {
            errs.push(format!("{path}: {v} not in {options:?}"));
        }
    }
    if let Some(alts) = schema.get("oneOf").and_then(Value::as_array) {
        let ok = alts
            .iter()
            .filter(|alt| {
                let mut e = Vec::new();
                validate(root, alt, v, path, &mut e);
                e.is_empty()
            })
            .count();
        if ok != 1 {
            errs.push(format!("{path}: {ok} oneOf branches match"));
        }
    }
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        let is = |ty: &str| match ty {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "boolean" => v.is_boolean(),
            "null" => v.is_null(),
            "number" => v.is_number(),
            "integer" => v.is_u64() || v.is_i64(),
            _ => false,
        };
        if !types.iter().any(|ty| is(ty)) {
            errs.push(format!("{path}: {v} is not of type {types:?}"));
            return;
        }
    }
    if let Some(x) = v.as_f64() {
        let bound = |k: &str| schema.get(k).and_then(Value::as_f64);
        if bound("minimum").is_some_and(|m| x < m) || bound("maximum").is_some_and(|m| x > m) {
            errs.push(format!("{path}: {x} out of range"));
        }
        if bound("exclusiveMinimum").is_some_and(|m| x <= m) || bound("exclusiveMaximum").is_some_and(|m| x >= m) {
            errs.push(format!("{path}: {x} out of range"));
        }
    }
    if let Some(obj) = v.as_object() {
        for key in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !obj.contains_key(key.as_str().unwrap()) {
                errs.push(format!("{path}: missing {key}"));
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        for (k, child) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(s) => validate(root, s, child, &format!("{path}.{k}"), errs),
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    errs.push(format!("{path}: unexpected field {k}"))
                }
                None => {}
            }
        }
    }
    if let Some(items) = v.as_array() {
        let len = items.len() as u64;
        if schema.get("minItems").and_then(Value::as_u64).is_some_and(|m| len < m)
            || schema.get("maxItems").and_then(Value::as_u64).is_some_and(|m| len > m)
        {
            errs.push(format!("{path}: {len} items"));
        }
        if let Some(s) = schema.get("items") {
            for (i, item) in items.iter().enumerate() {
                validate(root, s, item, &format!("{path}[{i}]"), errs);
            }
        }
    }
}

fn assert_valid(v: &Value) {
    let schema: Value = serde_json::from_str(&fs::read_to_string(schema_path()).unwrap()).unwrap();
    let mut errs = Vec::new();
    validate(&schema, &schema, v, "$", &mut errs);
    assert!(errs.is_empty(), "schema violations: {errs:#?}");
}

fn without_timings(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timings");
    v
}

fn boston_compare(extra: &[&str]) -> Output {
    let data = boston().display().to_string();
    let mut args = vec!["compare", "--data", data.as_str(), "--response", "medv", "--index-var", "log_lstat"];
    args.extend_from_slice(extra);
    elr(&args)
}

#[test]
fn boston_workflow_reports_every_field() {
    let o = boston_compare(&["--model-a", "varycoef", "--model-b", "additive:log_lstat,crim,rm,log_tax,nox,ptratio,age"]);
    let r = report(&o);
    assert_valid(&r);
    assert!(r["statistic"].as_f64().unwrap() > 0.0);
    assert!(r["dape"].as_f64().unwrap().is_finite());
    let expected = match r["decision"].as_str().unwrap() {
        "Equivalent" => 0,
        "PreferA" => 10,
        "PreferB" => 11,
        other => panic!("unexpected decision {other}"),
    };
    assert_eq!(code(&o), expected);
    assert_eq!(r["models"][0]["kind"], "varycoef");
    assert_eq!(r["models"][1]["q"].as_array().unwrap().len(), 7);
    assert_eq!(r["config"]["index_var"], "log_lstat");
}

#[test]
fn identical_models_are_equivalent() {
    let o = boston_compare(&["--model-a", "additive", "--model-b", "additive"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(&o);
    assert_eq!(r["statistic"].as_f64(), Some(0.0));
    assert_eq!(r["dape"].as_f64(), Some(0.0));
    assert_eq!(r["decision"], "Equivalent");
}

#[test]
fn varying_coefficient_without_index_is_a_usage_error() {
    let data = boston().display().to_string();
    let o = elr(&["compare", "--data", &data, "--response", "medv", "--model-a", "varycoef", "--model-b", "additive"]);
    assert_eq!(code(&o), 2);
    assert!(o.stdout.is_empty());
    assert!(stderr(&o).contains("--index-var"));
}

#[test]
fn errors_map_to_exit_codes_and_name_the_stage() {
    let dir = TempDir::new().unwrap();
    let bad = write(&dir, "bad.csv", "y,x1\n1,0\n2,oops\n3,1\n");
    let o = elr(&["compare", "--data", &bad, "--response", "y", "--model-a", "additive", "--model-b", "additive"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("load data") && stderr(&o).contains("line 3"), "{}", stderr(&o));

    let data = boston().display().to_string();
    let o = elr(&["compare", "--data", &data, "--response", "medv", "--model-a", "spline:x", "--model-b", "additive"]);
    assert_eq!(code(&o), 2);
    let o = elr(&["compare", "--data", &data, "--response", "medv", "--model-a", "additive", "--model-b", "additive", "--alpha", "1.5"]);
    assert_eq!(code(&o), 2);
    let o = elr(&["compare", "--bogus"]);
    assert_eq!(code(&o), 2);

    // 20 rows cannot support a model with more basis functions than rows
    let tiny = write(&dir, "tiny.csv", &design(20, |x1, x2, _| x1 + x2));
    let o = elr(&["compare", "--data", &tiny, "--response", "y", "--model-a", "additive", "--model-b", "additive", "--q-grid", "30"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn reports_are_deterministic_and_written_to_out() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r.json").display().to_string();
    let args = ["--model-a", "varycoef", "--model-b", "additive", "--seed", "3"];
    let first = boston_compare(&args);
    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.as_str()]);
    let second = boston_compare(&with_out);
    assert!(second.stdout.is_empty());
    assert_eq!(code(&first), code(&second));
    let written: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(without_timings(report(&first)), without_timings(written));
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = TempDir::new().unwrap();
    let data = boston().display().to_string();
    let cfg = write(
        &dir,
        "elr.toml",
        &format!("data = {data:?}\nresponse = \"medv\"\nmodel_a = \"additive\"\nmodel_b = \"additive:rm,lin(crim)\"\nalpha = 0.1\nknots = \"uniform\"\n"),
    );
    let r = report(&elr(&["compare", "--config", &cfg]));
    assert_eq!(r["config"]["alpha"].as_f64(), Some(0.1));
    assert_eq!(r["config"]["knots"], "uniform");
    assert_eq!(r["config"]["order"].as_u64(), Some(4));
    let r = report(&elr(&["compare", "--config", &cfg, "--alpha", "0.01"]));
    assert_eq!(r["config"]["alpha"].as_f64(), Some(0.01));
    assert_eq!(r["alpha"].as_f64(), Some(0.01));

    let broken = write(&dir, "broken.toml", "alpah = 0.1\n");
    assert_eq!(code(&elr(&["compare", "--config", &broken])), 2);
}

#[test]
fn thread_cap_comes_from_the_environment() {
    let data = boston().display().to_string();
    let args = ["compare", "--data", &data, "--response", "medv", "--model-a", "additive", "--model-b", "additive:rm,crim"];
    let o = Command::new(BIN).args(args).env("ELR_THREADS", "2").output().unwrap();
    assert_eq!(report(&o)["config"]["threads"].as_u64(), Some(2));
    let o = Command::new(BIN).args(args).env("ELR_THREADS", "many").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn noiseless_response_drops_the_unused_covariate() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "d.csv", &design(300, |_, x2, _| x2));
    for workers in ["1", "4"] {
        let o = elr(&["test-var", "--data", &data, "--response", "y", "--drop-var", "x1", "--workers", workers]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let r = report(&o);
        assert_valid(&r);
        assert_eq!(r["decision"], "Equivalent");
        assert_eq!(r["verdict"], "Drop");
        assert_eq!(r["statistic"].as_f64(), Some(0.0));
    }
}

#[test]
fn needed_covariate_is_kept() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "d.csv", &design(400, |x1, x2, i| (6.0 * x1).sin() + x2 + 0.1 * ((i * 7919 % 101) as f64 / 101.0 - 0.5)));
    let o = elr(&["test-var", "--data", &data, "--response", "y", "--drop-var", "x1"]);
    assert_eq!(code(&o), 11, "{}", stderr(&o));
    assert_eq!(report(&o)["verdict"], "Keep");
}

#[test]
fn sharded_test_matches_single_machine_shadow() {
    let data = boston().display().to_string();
    let o = elr(&[
        "test-var", "--data", &data, "--response", "medv", "--covariates", "log_lstat,rm,log_tax,ptratio",
        "--drop-var", "rm", "--workers", "8", "--verify",
    ]);
    let r = report(&o);
    assert_valid(&r);
    assert_eq!(r["distributed_matches_full"], Value::Bool(true));
    assert_eq!(r["workers"].as_u64(), Some(8));
    assert!(stderr(&o).contains("verify") && stderr(&o).contains("match"));
    let single = report(&elr(&[
        "test-var", "--data", &data, "--response", "medv", "--covariates", "log_lstat,rm,log_tax,ptratio", "--drop-var", "rm",
    ]));
    assert_eq!(single["decision"], r["decision"]);
    let (a, b) = (single["statistic"].as_f64().unwrap(), r["statistic"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-8 * a.max(1.0));
}

#[test]
fn shard_envelopes_reproduce_the_test() {
    let dir = TempDir::new().unwrap();
    let shards = dir.path().join("shards").display().to_string();
    let data = boston().display().to_string();
    let base = ["test-var", "--data", &data, "--response", "medv", "--covariates", "log_lstat,rm,ptratio", "--drop-var", "ptratio"];
    let mut emit = base.to_vec();
    emit.extend(["--workers", "5", "--seed", "11", "--emit-shards", &shards]);
    let emitted = elr(&emit);
    assert!(dir.path().join("shards/manifest.json").exists());
    assert!(dir.path().join("shards/worker-4.json").exists());
    let mut finish = base.to_vec();
    finish.extend(["--from-shards", &shards]);
    let finished = elr(&finish);
    assert_eq!(code(&emitted), code(&finished), "{}", stderr(&finished));
    let (a, b) = (report(&emitted), report(&finished));
    for key in ["statistic", "dape", "p_value", "decision", "ape_a", "ape_b", "workers"] {
        assert_eq!(a[key], b[key], "{key}");
    }

    // a tampered envelope is a data error
    let w0 = dir.path().join("shards/worker-0.json");
    let mut env: Value = serde_json::from_str(&fs::read_to_string(&w0).unwrap()).unwrap();
    env["worker_id"] = Value::from(1);
    fs::write(&w0, env.to_string()).unwrap();
    assert_eq!(code(&elr(&finish)), 3);
}

#[test]
fn quantile_examples() {
    let dir = TempDir::new().unwrap();
    let a = write(&dir, "a.csv", "v\n1\n2\n3\n");
    let b = write(&dir, "b.csv", "v\n10\n20\n30\n40\n");
    assert_eq!(stdout(&elr(&["quantile", "--data", &a, "--column", "v", "--q", "0.5"])).trim(), "2");
    assert_eq!(stdout(&elr(&["quantile", "--data", &b, "--column", "v", "--q", "0.25"])).trim(), "17.5");
    assert_eq!(code(&elr(&["quantile", "--data", &b, "--column", "v", "--q", "1.5"])), 2);
    assert_eq!(code(&elr(&["quantile", "--data", &b, "--column", "w", "--q", "0.5"])), 3);
}

#[test]
fn quantile_does_not_depend_on_worker_count() {
    let dir = TempDir::new().unwrap();
    let mut text = String::from("v\n");
    let mut x: u64 = 12345;
    for _ in 0..50_000 {
        x = x.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        text.push_str(&format!("{:?}\n", (x >> 11) as f64 / (1u64 << 53) as f64));
    }
    let data = write(&dir, "big.csv", &text);
    for q in ["0", "0.3", "0.5", "0.999", "1"] {
        let one = stdout(&elr(&["quantile", "--data", &data, "--column", "v", "--q", q, "--workers", "1"]));
        let many = stdout(&elr(&["quantile", "--data", &data, "--column", "v", "--q", q, "--workers", "16", "--seed", "9"]));
        assert_eq!(one, many, "q = {q}");
    }
}

fn simulate(dir: &Path, extra: &[&str]) -> (String, String, String) {
    let out = dir.display().to_string();
    let mut args = vec!["simulate", "--out-dir", out.as_str()];
    args.extend_from_slice(extra);
    let o = elr(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let read = |f: &str| fs::read_to_string(dir.join(f)).unwrap();
    (read("table.csv"), read("table.json"), read("trace.csv"))
}

#[test]
fn simulation_null_rate_is_in_a_wide_band() {
    let dir = TempDir::new().unwrap();
    let (csv, json, _) = simulate(dir.path(), &["--example", "2", "--grid", "0,0", "--n", "200", "--reps", "50"]);
    let table: Value = serde_json::from_str(&json).unwrap();
    let row = &table["rows"][0];
    assert_eq!(row["alpha"].as_f64(), Some(0.05));
    assert_eq!(row["completed"].as_u64(), Some(50));
    // four binomial standard errors around the nominal level
    let rate = row["rate"].as_f64().unwrap();
    let band = 4.0 * (0.05f64 * 0.95 / 50.0).sqrt();
    assert!((rate - 0.05).abs() <= band, "rate {rate}");
    assert!(csv.starts_with("example,"));
}

#[test]
fn simulation_reruns_are_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let args = ["--example", "3", "--grid", "0.1", "--n", "150", "--reps", "1", "--seed", "77"];
    assert_eq!(simulate(a.path(), &args), simulate(b.path(), &args));
}

#[test]
fn example_four_tables_do_not_depend_on_worker_count() {
    let strip = |csv: &str| -> Vec<String> {
        csv.lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f.remove(5); // workers
                f.join(",")
            })
            .collect()
    };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let common = ["--example", "4", "--grid", "0;0.1", "--n", "600", "--reps", "4", "--seed", "5"];
    let one = simulate(a.path(), &[&common[..], &["--workers", "1"]].concat());
    let fifty = simulate(b.path(), &[&common[..], &["--workers", "50"]].concat());
    assert_eq!(strip(&one.0), strip(&fifty.0));
    assert!(one.0.lines().next().unwrap().split(',').nth(5) == Some("workers"));
}

#[test]
fn schema_command_prints_the_shipped_file() {
    let o = elr(&["schema"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), fs::read_to_string(schema_path()).unwrap());
}
