use serde_json::{json, Value};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use vpflow_cli::config::ExperimentConfig;
use vpflow_cli::csvio::Table;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vpflow"))
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Outcome {
    code: i32,
    stderr: String,
}

fn run_config(dir: &Path, name: &str, cfg: &Value, extra: &[&str]) -> Outcome {
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    let out = dir.join(name);
    let o = bin()
        .arg("run")
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .env_remove("VPFLOW_THREADS")
        .output()
        .unwrap();
    Outcome { code: o.status.code().unwrap_or(-1), stderr: String::from_utf8_lossy(&o.stderr).into_owned() }
}

fn error_json(o: &Outcome) -> Value {
    serde_json::from_str(o.stderr.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {}", o.stderr))
}

fn read(dir: &Path, run: &str, file: &str) -> Table {
    Table::read(&dir.join(run).join(file)).unwrap()
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

#[test]
fn schema_matches_config_types() {
    let schema: Value = serde_json::from_str(include_str!("../schema/config.schema.json")).unwrap();
    let defs = &schema["$defs"];
    let props = |v: &Value| keys(&v["properties"]);

    let full = json!({
        "experiment": "compare", "seed": 1, "output_dir": "x",
        "target": {"name": "gmm1d"}, "targets": [], "time": {"delta": 0.1, "T": 1.0}, "sweep": [],
        "grid": {"axes": [{"lo": -1.0, "hi": 1.0, "count": 3}]},
        "ltc": {}, "transport": {}, "training": {"score": {}, "iresnet": {}}, "evaluation": {},
        "checkpoint": "c", "compare": {}
    });
    let cfg = ExperimentConfig::from_json_str(&full.to_string()).unwrap();
    let v = serde_json::to_value(&cfg).unwrap();
    assert_eq!(props(&schema), keys(&v));
    for (name, def) in [
        ("ltc", &schema["properties"]["ltc"]),
        ("transport", &schema["properties"]["transport"]),
        ("training", &schema["properties"]["training"]),
        ("evaluation", &schema["properties"]["evaluation"]),
        ("compare", &schema["properties"]["compare"]),
        ("integrator", &defs["integrator"]),
        ("time", &defs["window"]),
        ("target", &defs["target"]),
        ("grid", &defs["grid"]),
    ] {
        assert_eq!(props(def), keys(&v[name]), "{name}");
    }
    assert_eq!(props(&defs["dsm"]), keys(&v["training"]["score"]));
    assert_eq!(props(&defs["network"]), keys(&v["training"]["score"]["network"]));
    assert_eq!(props(&defs["iresnet"]), keys(&v["training"]["iresnet"]));

    let names: BTreeSet<&str> = defs["target"]["properties"]["name"]["enum"].as_array().unwrap().iter().map(|s| s.as_str().unwrap()).collect();
    assert_eq!(names, vpflow::targets::BUILTIN_TARGETS.into_iter().collect());
    for e in schema["properties"]["experiment"]["enum"].as_array().unwrap() {
        let c = json!({"experiment": e});
        assert!(ExperimentConfig::from_json_str(&c.to_string()).is_ok(), "{e}");
    }
}

#[test]
fn shipped_configs_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(workspace().join("configs")).unwrap() {
        let p = entry.unwrap().path();
        let (cfg, _) = ExperimentConfig::load(&p).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 7);
}

#[test]
fn converge_writes_sweep_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "experiment": "converge",
        "target": {"name": "gmm1d"},
        "sweep": [{"delta": 0.1, "T": 2.0}, {"delta": 0.01, "T": 3.0}],
        "grid": {"axes": [{"lo": -8.0, "hi": 8.0, "count": 401}]},
    });
    let o = run_config(dir.path(), "conv", &cfg, &[]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let t = read(dir.path(), "conv", "convergence.csv");
    assert_eq!(t.numbers("delta").unwrap(), vec![0.1, 0.01]);
    assert_eq!(t.numbers("T").unwrap(), vec![2.0, 3.0]);
    let l1 = t.numbers("l1").unwrap();
    assert!(l1[1] < l1[0]);
    for col in ["kl_bound_slack", "pinsker_slack", "holder_slack", "talagrand_slack"] {
        assert!(t.numbers(col).unwrap().iter().all(|s| *s >= -1e-6), "{col}");
    }
    let m: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("conv/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["experiment"], "converge");
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["seed"], 0);
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
    let outs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(outs, vec!["convergence.csv", "bounds.json"]);
}

#[test]
fn invalid_window_exits_2_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"experiment": "transport", "target": {"name": "gmm1d"}, "time": {"delta": 3.0, "T": 3.0}});
    let o = run_config(dir.path(), "bad", &cfg, &[]);
    assert_eq!(o.code, 2);
    let e = error_json(&o);
    assert_eq!(e["kind"], "config");
    assert_eq!(e["pointer"], "/time/delta");
    assert_eq!(e["exit_code"], 2);

    let o = run_config(dir.path(), "typo", &json!({"experiment": "converge", "sweeps": []}), &[]);
    assert_eq!(o.code, 2);
    assert_eq!(error_json(&o)["pointer"], "/sweeps");

    let o = run_config(dir.path(), "empty", &json!({"experiment": "compare", "targets": [], "time": {"delta": 0.01, "T": 3.0}}), &[]);
    assert_eq!(o.code, 2);
    assert_eq!(error_json(&o)["pointer"], "/targets");

    let missing = bin().args(["run", "/nonexistent/config.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "experiment": "transport",
        "target": {"name": "gmm1d"},
        "time": {"delta": 0.0, "T": 3.0},
        "integrator": {"max_steps": 1},
        "transport": {"points": [[0.5]]},
    });
    let o = run_config(dir.path(), "fail", &cfg, &[]);
    assert_eq!(o.code, 3, "{}", o.stderr);
    let e = error_json(&o);
    assert_eq!(e["kind"], "numerical");
    assert_eq!(e["context"], "transport");
}

#[test]
fn transport_outputs_and_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "experiment": "transport",
        "target": {"name": "gaussian", "params": {"mean": [0.0], "std": 2.0}},
        "time": {"delta": 0.0, "T": 3f64.ln()},
        "transport": {"points": [[-1.0], [0.5], [2.0]]},
    });
    let o = run_config(dir.path(), "tr", &cfg, &[]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let t = read(dir.path(), "tr", "transport.csv");
    assert_eq!(t.headers, vec!["x0", "y0", "logdet"]);
    // N(0,4) over [0, ln 3] contracts by √2/2
    for (x, y) in t.numbers("x0").unwrap().iter().zip(t.numbers("y0").unwrap()) {
        assert!((y - x * 0.5f64.sqrt()).abs() < 1e-6 * x.abs());
    }
    let j: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("tr/transport.json")).unwrap()).unwrap();
    let measured = j["measured_lipschitz"]["forward"].as_f64().unwrap();
    let cert = j["certificate"]["value"].as_f64().unwrap();
    assert!(measured <= cert * (1.0 + 1e-3));
}

#[test]
fn score_bounds_curves() {
    let dir = tempfile::tempdir().unwrap();
    let std_normal = json!({"experiment": "score_bounds", "target": {"name": "gaussian", "params": {"mean": [0.0], "std": 1.0}}, "ltc": {"count": 6}});
    let o = run_config(dir.path(), "n01", &std_normal, &[]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let t = read(dir.path(), "n01", "ltc.csv");
    assert_eq!(t.headers, vec!["t", "empirical_L", "theoretical_L"]);
    assert!(t.numbers("empirical_L").unwrap().iter().all(|l| (l - 1.0).abs() < 1e-12));

    let two = json!({"experiment": "score_bounds", "target": {"name": "two_uniform"}, "ltc": {"t_min": 0.001, "t_max": 5.0, "count": 7}});
    let o = run_config(dir.path(), "tu", &two, &[]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let t = read(dir.path(), "tu", "ltc.csv");
    let ts = t.numbers("t").unwrap();
    let emp = t.numbers("empirical_L").unwrap();
    let theo = t.numbers("theoretical_L").unwrap();
    // rows: t = 1e-3, ..., 1, ..., 5 on a 7-point log grid
    let at_one = ts.iter().position(|t| (t - 1.0).abs() < 0.5).unwrap();
    assert!(emp[0] > emp[at_one]);
    assert!((0.8..=1.2).contains(emp.last().unwrap()));
    assert!(emp.iter().zip(&theo).all(|(e, b)| *e <= b * (1.0 + 1e-6)));
}

fn tiny_training() -> Value {
    json!({
        "score": {"steps": 60, "batch_size": 32, "log_every": 10, "network": {"width": 16, "embed_width": 8, "n_freq": 4, "blocks": 1}},
        "iresnet": {"k": 2, "width": 8, "steps": 40, "batch_size": 32}
    })
}

#[test]
fn training_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let score = json!({
        "experiment": "train_score", "seed": 5, "target": {"name": "gmm1d"},
        "time": {"delta": 0.01, "T": 3.0}, "training": tiny_training(), "evaluation": {"n_mc": 2000},
    });
    let iresnet = json!({
        "experiment": "train_iresnet", "seed": 5, "target": {"name": "two_uniform"},
        "training": tiny_training(), "evaluation": {"roundtrip_points": 50},
    });
    for (name, cfg, files) in [
        ("score", &score, vec!["training_log.csv", "score_checkpoint.json"]),
        ("ires", &iresnet, vec!["training_log.csv", "iresnet_checkpoint.json"]),
    ] {
        let a = run_config(dir.path(), &format!("{name}_a"), cfg, &[]);
        let b = run_config(dir.path(), &format!("{name}_b"), cfg, &[]);
        assert_eq!((a.code, b.code), (0, 0), "{} {}", a.stderr, b.stderr);
        for f in files {
            let fa = std::fs::read(dir.path().join(format!("{name}_a")).join(f)).unwrap();
            let fb = std::fs::read(dir.path().join(format!("{name}_b")).join(f)).unwrap();
            assert_eq!(fa, fb, "{name}/{f}");
        }
        let c = run_config(dir.path(), &format!("{name}_c"), cfg, &["--seed", "6"]);
        assert_eq!(c.code, 0);
        let la = std::fs::read(dir.path().join(format!("{name}_a/training_log.csv"))).unwrap();
        let lc = std::fs::read(dir.path().join(format!("{name}_c/training_log.csv"))).unwrap();
        assert_ne!(la, lc, "seed override must change the run");
    }
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ires_a/report.json")).unwrap()).unwrap();
    assert!(rep["roundtrip_max_error"].as_f64().unwrap() < 1e-7);
}

#[test]
fn compare_table_shape_and_checkpoint_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let score = json!({
        "experiment": "train_score", "target": {"name": "gmm1d"}, "time": {"delta": 0.01, "T": 3.0},
        "training": tiny_training(), "evaluation": {"n_mc": 200},
    });
    assert_eq!(run_config(dir.path(), "s", &score, &[]).code, 0);
    let ck = dir.path().join("s/score_checkpoint.json");
    let cmp = json!({
        "experiment": "compare",
        "targets": [{"name": "gmm1d"}],
        "time": {"delta": 0.01, "T": 3.0},
        "grid": {"axes": [{"lo": -8.0, "hi": 8.0, "count": 401}]},
        "training": tiny_training(),
        "compare": {"score_checkpoints": {"gmm1d": ck}},
    });
    let o = run_config(dir.path(), "cmp", &cmp, &[]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let t = read(dir.path(), "cmp", "compare.csv");
    assert_eq!(t.headers, vec!["target", "model", "L_or_T", "l1", "kl"]);
    let models: Vec<String> = t.column("model").unwrap().iter().map(|c| format!("{c:?}")).collect();
    assert_eq!(models.len(), 5);
    let l_or_t = t.numbers("L_or_T").unwrap();
    assert_eq!(&l_or_t[2..], &[0.25, 0.75, 0.95]);
    let (l1, kl) = (t.numbers("l1").unwrap(), t.numbers("kl").unwrap());
    // the exact score beats a 60-step network
    assert!(l1[0] < l1[1] && kl[0] < kl[1]);

    let missing = json!({"experiment": "compare", "targets": [{"name": "gmm1d"}], "time": {"delta": 0.01, "T": 3.0},
        "compare": {"score_checkpoints": {"gmm1d": "/nonexistent.json"}}});
    assert_eq!(run_config(dir.path(), "miss", &missing, &[]).code, 2);
}

#[test]
fn girsanov_check_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let score = json!({
        "experiment": "train_score", "target": {"name": "gmm1d"}, "time": {"delta": 0.01, "T": 3.0},
        "training": tiny_training(), "evaluation": {"n_mc": 200},
    });
    assert_eq!(run_config(dir.path(), "s", &score, &[]).code, 0);
    let g = json!({
        "experiment": "girsanov_check", "target": {"name": "gmm1d"}, "time": {"delta": 0.01, "T": 3.0},
        "checkpoint": dir.path().join("s/score_checkpoint.json"),
        "grid": {"axes": [{"lo": -8.0, "hi": 8.0, "count": 401}]},
        "evaluation": {"n_mc": 2000},
    });
    let o = run_config(dir.path(), "g", &g, &["--threads", "1"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("g/girsanov.json")).unwrap()).unwrap();
    for k in ["E_dT", "kl_lhs", "kl_T", "kl_rhs", "slack"] {
        assert!(rep["values"][k].is_number(), "{k}: {rep}");
    }
    let m: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("g/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["threads"], 1);
}
