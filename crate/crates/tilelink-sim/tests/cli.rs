//! End-to-end tests of the `tilelink-sim` binary: exit codes, trace JSONL
//! schema, and report JSON shape.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_tilelink-sim");

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

const BASE_KERNEL: &str = r#""kernel": {
    "kind": "ag_gemm", "world_size": 2, "channels_per_rank": 2,
    "m": 32, "n": 8, "k": 8,
    "comm_tile_rows": 4, "comp_tile_rows": 8, "comp_tile_cols": 8
}"#;

#[test]
fn verify_ok_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &format!("{{{BASE_KERNEL}}}"));
    let out = run(&["verify", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("verify ag_gemm: ok"), "{stdout}");
}

#[test]
fn verify_with_race_check_and_delay_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &format!("{{{BASE_KERNEL}}}"));
    let out = run(
        &[
            "verify",
            "--config",
            cfg.to_str().unwrap(),
            "--race-check",
            "--inject-comm-delay-us",
            "50",
            "--timeout-ms",
            "5000",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
}

#[test]
fn bad_config_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        &format!("{{{BASE_KERNEL}, \"bogus\": 1}}"),
    );
    let out = run(&["verify", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(3), "{out:?}");

    let out = run(&["verify", "--config", "/nonexistent/run.json"], &[]);
    assert_eq!(out.status.code(), Some(3), "{out:?}");

    // Valid JSON, invalid kernel: a tile taller than a channel block.
    let cfg = write_config(
        dir.path(),
        "tile.json",
        r#"{"kernel": {"kind": "ag_gemm", "world_size": 2, "channels_per_rank": 2,
            "m": 32, "n": 8, "k": 8, "comm_tile_rows": 16}}"#,
    );
    let out = run(&["verify", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn sabotage_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sab.json",
        &format!("{{{BASE_KERNEL}, \"sabotage_drop_notify\": true, \"timeout_ms\": 300}}"),
    );
    let out = run(&["verify", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("deadlock"), "{stderr}");
    assert!(stderr.contains("channel"), "{stderr}");
}

#[test]
fn timeout_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    // No timeout in the config: TILELINK_SIM_TIMEOUT_MS decides how long the
    // sabotaged run blocks before the deadlock diagnosis.
    let cfg = write_config(
        dir.path(),
        "sab.json",
        &format!("{{{BASE_KERNEL}, \"sabotage_drop_notify\": true}}"),
    );
    let t0 = std::time::Instant::now();
    let out = run(
        &["verify", "--config", cfg.to_str().unwrap()],
        &[("TILELINK_SIM_TIMEOUT_MS", "200")],
    );
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    assert!(t0.elapsed() < std::time::Duration::from_secs(5));
}

#[test]
fn trace_jsonl_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &format!("{{{BASE_KERNEL}}}"));
    let trace = dir.path().join("trace.jsonl");
    let out = run(
        &[
            "trace",
            "--config",
            cfg.to_str().unwrap(),
            "--trace",
            trace.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let body = std::fs::read_to_string(&trace).unwrap();
    let lines: Vec<&str> = body.lines().filter(|l| !l.trim().is_empty()).collect();
    assert!(!lines.is_empty());
    for line in lines {
        let v: Value = serde_json::from_str(line).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["channel", "kind", "rank", "t_ns", "tile", "unit"]);
        assert!(obj["rank"].is_u64());
        assert!(obj["t_ns"].is_u64());
        assert!(matches!(
            obj["unit"].as_str().unwrap(),
            "host" | "compute" | "copy"
        ));
        assert!(obj["kind"].is_string());
        assert!(obj["tile"].is_null() || obj["tile"].is_u64());
        assert!(obj["channel"].is_null() || obj["channel"].is_u64());
    }
}

#[test]
fn bench_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &format!("{{{BASE_KERNEL}}}"));
    let report = dir.path().join("report.json");
    let out = run(
        &[
            "bench",
            "--config",
            cfg.to_str().unwrap(),
            "--repeat",
            "1",
            "--report",
            report.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["comp_only_s", "comm_only_s", "overlap_s", "ratio"] {
        assert!(v[key].is_f64() || v[key].is_u64(), "missing {key}: {v}");
    }
    assert_eq!(v["config"]["kind"], "ag_gemm");
    assert_eq!(v["config"]["world_size"], 2);
}

#[test]
fn sweep_runs_every_combination() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.json",
        &format!(
            "{{{BASE_KERNEL}, \"world_sizes\": [1, 2], \"modes\": [\"push\", \"pull\"], \
             \"bindings\": [\"core\", \"copy_engine\"]}}"
        ),
    );
    let out = run(&["sweep", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.matches("verify ag_gemm: ok").count(), 8, "{stdout}");
}
