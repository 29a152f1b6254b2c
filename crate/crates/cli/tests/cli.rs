use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ovkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovkv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ovkv_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovkv"))
        .args(args)
        .env(key, val)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn zero_frames_writes_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = ovkv(&["run", "--frames", "0", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(dir.path().join("metrics.jsonl")).unwrap(), b"");
    assert_eq!(summary(dir.path())["frames"], 0);
}

#[test]
fn non_binding_budget_evicts_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = ovkv(&["run", "--frames", "50", "--budget", "100000", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let sum = summary(dir.path());
    assert_eq!(sum["evicted"], 0);
    assert_eq!(sum["peak_tokens"], 50 * 69 * 4);
}

#[test]
fn summary_echoes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = ovkv(&["run", "--frames", "5", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = &summary(dir.path())["config"];
    assert_eq!(cfg["smoothing_alpha"], 0.5);
    assert_eq!(cfg["hybrid_beta"], 0.5);
    assert_eq!(cfg["coverage_tau"], 0.2);
    assert_eq!(cfg["anchor_eta"], 0.05);
    assert_eq!(cfg["max_anchors"], 3);
    assert_eq!(cfg["min_anchor_interval"], 100);
    assert_eq!(cfg["gaussian_kernel_size"], 5);
    assert_eq!(cfg["gaussian_sigma"], 1.0);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("cfg.json");
    std::fs::write(&file, r#"{"hybrid_beta": 0.25, "smoothing_alpha": 0.75}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = ovkv(&["run", "--frames", "3", "--config", s(&file), "--alpha", "0.1", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = &summary(&out_dir)["config"];
    assert_eq!(cfg["hybrid_beta"], 0.25);
    assert_eq!(cfg["smoothing_alpha"], 0.1);
}

#[test]
fn infeasible_budget_is_a_config_error() {
    let out = ovkv(&["run", "--frames", "3", "--budget", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("590 tokens short"));
}

#[test]
fn bad_unit_interval_is_a_config_error() {
    assert_eq!(ovkv(&["run", "--frames", "3", "--beta", "1.5"]).status.code(), Some(2));
}

#[test]
fn missing_config_file_is_an_io_error() {
    assert_eq!(ovkv(&["run", "--config", "/nonexistent/cfg.json"]).status.code(), Some(3));
}

#[test]
fn probe_needs_two_strategies() {
    let out = ovkv(&["probe", "--frames", "5", "--seeds", "1", "--strategy", "ffn"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ovkv(&["probe", "--frames", "5", "--seeds", "1", "--strategy", "ffn,ffn"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn probe_reports_attention_allocations() {
    let dir = tempfile::tempdir().unwrap();
    let out = ovkv_env(
        &["probe", "--frames", "12", "--seeds", "2", "--strategy", "ffn,attention,random", "--out", s(dir.path())],
        "OVKV_THREADS",
        "1",
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rows = csv::Reader::from_path(dir.path().join("probe.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "attention_matrices").unwrap();
    let name = headers.iter().position(|h| h == "strategy").unwrap();
    let mut seen = 0;
    for r in rows.records() {
        let r = r.unwrap();
        let n: u64 = r[col].parse().unwrap();
        match &r[name] {
            "attention" => assert!(n > 0),
            _ => assert_eq!(n, 0),
        }
        seen += 1;
    }
    assert_eq!(seen, 3);
    let json: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("probe.json")).unwrap()).unwrap();
    assert_eq!(json["reports"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let out = ovkv_env(&["probe", "--frames", "3", "--seeds", "1"], "OVKV_THREADS", "zero");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_round_trip_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = ovkv(&["run", "--frames", "30", "--seed", "4", "--scene", "corridor", "--trace-out", s(&trace)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(ovkv(&["replay", s(&trace)]).status.code(), Some(0));
    assert_eq!(ovkv(&["run", "--replay", s(&trace)]).status.code(), Some(0));

    // dropping the last frame still replays; a truncated line does not parse
    let text = std::fs::read_to_string(&trace).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let short = dir.path().join("short.jsonl");
    std::fs::write(&short, lines[..lines.len() - 1].join("\n")).unwrap();
    assert_eq!(ovkv(&["replay", s(&short)]).status.code(), Some(0));
    let cut = dir.path().join("cut.jsonl");
    std::fs::write(&cut, format!("{}\n{}", lines[0], &lines[1][..lines[1].len() / 2])).unwrap();
    assert_eq!(ovkv(&["replay", s(&cut)]).status.code(), Some(3));

    // tampering with a recorded metric is a mismatch
    let tampered = dir.path().join("tampered.jsonl");
    let mut v: Value = serde_json::from_str(lines[10]).unwrap();
    v["metrics"]["evicted"] = Value::from(v["metrics"]["evicted"].as_u64().unwrap() + 1);
    let mut rewritten: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
    rewritten[10] = v.to_string();
    std::fs::write(&tampered, rewritten.join("\n")).unwrap();
    let out = ovkv(&["replay", s(&tampered)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("evicted"));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(ovkv(&["replay", s(&empty)]).status.code(), Some(0));
    assert_eq!(ovkv(&["replay", s(&dir.path().join("none.jsonl"))]).status.code(), Some(3));
}

#[test]
fn trace_needs_ffn_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let out = ovkv(&["run", "--frames", "3", "--strategy", "random", "--trace-out", s(&dir.path().join("t"))]);
    assert_eq!(out.status.code(), Some(2));
}
