use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_relaycache"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).env_remove("RELAYCACHE_OUT_DIR").args(args).output().unwrap()
}

fn ok(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap()
}

fn small_spec(layers: usize) -> Value {
    json!({
        "num_layers": layers,
        "d_model": 32,
        "num_heads": 4,
        "num_kv_heads": 2,
        "d_head": 8,
        "d_ff": 48,
        "vocab_size": 64,
        "theta_base": 10000.0,
        "max_positions": 512,
        "norm_eps": 1e-5
    })
}

fn setup(dir: &Path, layers: usize) {
    std::fs::write(dir.join("spec.json"), small_spec(layers).to_string()).unwrap();
    ok(&run_in(dir, &["gen-model", "--spec", "spec.json", "--seed", "3", "--out", "m.bin"]));
    let workflow = json!({
        "schema_version": 1,
        "seed": 8,
        "agents": [
            {"name": "a", "template": [{"random": 6}], "max_new_tokens": 12},
            {"name": "b", "template": [{"random": 4}, {"upstream": 0}, {"random": 3}], "max_new_tokens": 6},
            {"name": "c", "template": [{"random": 4}, {"upstream": 0}, {"upstream": 1}], "max_new_tokens": 4}
        ]
    });
    std::fs::write(dir.join("w.json"), workflow.to_string()).unwrap();
}

#[test]
fn full_run_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 6);
    let args = |out: &'static str| {
        vec!["run", "--model", "m.bin", "--workflow", "w.json", "--strategy", "full", "--out", out, "--csv", "r.csv"]
    };
    ok(&run_in(dir.path(), &args("a.json")));
    ok(&run_in(dir.path(), &args("b.json")));
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.json")).unwrap());
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["schema_version"], 1);
    for agent in report["agents"].as_array().unwrap() {
        assert_eq!(agent["agreement"]["exact_sequence"], true);
    }
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn planted_calibration_gives_hand_traced_profile() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 12);
    let calib = json!({
        "schema_version": 1,
        "source": {"planted": {"curves": [{
            "s": [0.999, 0.995, 0.97, 0.90, 0.85, 0.88, 0.93, 0.94, 0.945, 0.947, 0.948, 0.948],
            "rho": [null, 0.2, 0.3, 0.6, 0.8, 0.9, 0.95, 0.97, 0.98, 0.985, 0.99, 0.99]
        }]}}
    });
    std::fs::write(dir.path().join("calib.json"), calib.to_string()).unwrap();
    std::fs::write(dir.path().join("params.json"), "{}").unwrap();
    let summary = ok(&run_in(
        dir.path(),
        &["profile", "--model", "m.bin", "--calib", "calib.json", "--params", "params.json", "--out", "p.json"],
    ));
    assert_eq!((&summary["l_start"], &summary["l_det"], &summary["l_end"]), (&json!(1), &json!(5), &json!(8)));
    let profile: Value = serde_json::from_slice(&std::fs::read(dir.path().join("p.json")).unwrap()).unwrap();
    assert_eq!(profile["l_det"], 5);
    assert_eq!(profile["params"]["tau_start"], 0.99);
}

#[test]
fn blend_alpha_one_agrees_with_oracle() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 6);
    ok(&run_in(
        dir.path(),
        &["run", "--model", "m.bin", "--workflow", "w.json", "--strategy", "blend", "--alpha", "1.0", "--out", "r.json"],
    ));
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    for agent in report["agents"].as_array().unwrap() {
        assert_eq!(agent["agreement"]["token_match_rate"], 1.0);
    }
}

#[test]
fn relay_run_with_profile_and_default_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 6);
    let profile = json!({
        "schema_version": 1, "model_id": "any", "num_layers": 6,
        "l_start": 1, "l_det": 2, "l_end": 4, "params": {}, "warnings": []
    });
    std::fs::write(dir.path().join("p.json"), profile.to_string()).unwrap();
    let out = bin()
        .current_dir(dir.path())
        .env("RELAYCACHE_OUT_DIR", dir.path().join("outs"))
        .args(["run", "--model", "m.bin", "--workflow", "w.json", "--profile", "p.json"])
        .output()
        .unwrap();
    let summary = ok(&out);
    assert!(summary["reuse_rate"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("outs/report.json").exists());
}

#[test]
fn exit_codes_and_error_json() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 6);

    let out = run_in(dir.path(), &["run", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");

    let out = run_in(dir.path(), &["run", "--model", "missing.bin", "--workflow", "w.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "unreadable_file");

    std::fs::write(dir.path().join("bad.json"), r#"{"schema_version": 7, "seed": 0, "agents": []}"#).unwrap();
    let out = run_in(dir.path(), &["run", "--model", "m.bin", "--workflow", "bad.json", "--strategy", "full"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_json(&out)["error"], "schema_violation");

    std::fs::write(dir.path().join("junk.bin"), b"not a model").unwrap();
    let out = run_in(dir.path(), &["run", "--model", "junk.bin", "--workflow", "w.json"]);
    assert_eq!(out.status.code(), Some(4));

    let out = run_in(dir.path(), &["run", "--model", "m.bin", "--workflow", "w.json", "--strategy", "relay"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "runtime");
}

#[test]
fn bench_writes_rows_per_length_and_strategy() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 6);
    std::fs::write(
        dir.path().join("p.json"),
        json!({"schema_version": 1, "model_id": "x", "num_layers": 6, "l_start": 0, "l_det": 2, "l_end": 4})
            .to_string(),
    )
    .unwrap();
    let summary = ok(&run_in(
        dir.path(),
        &["bench", "--model", "m.bin", "--lengths", "16,32", "--agents", "3", "--profile", "p.json", "--out", "b.csv"],
    ));
    assert_eq!(summary["rows"], 8);
    let csv = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn observe_writes_csvs() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 6);
    let calib = json!({
        "schema_version": 1, "seed": 1, "instances": 2,
        "source": {"two_stage": {"shared_prefix_len": 4, "stage1_prompt_len": 6, "segment_len": 10, "stage2_prefix_len": 3}}
    });
    std::fs::write(dir.path().join("c.json"), calib.to_string()).unwrap();
    ok(&run_in(dir.path(), &["observe", "--model", "m.bin", "--calib", "c.json", "--out-dir", "obs"]));
    for f in ["macro.csv", "token_profile.csv", "recovery.csv"] {
        assert!(dir.path().join("obs").join(f).exists(), "{f}");
    }
}
