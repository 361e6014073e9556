use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn esmem(args: &[&str]) -> Output {
    let cfg = fixture("config.toml");
    Command::new(env!("CARGO_BIN_EXE_esmem"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env_remove("ESMEM_QUANTILE")
        .env_remove("ESMEM_PROVIDER")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = esmem(args);
    assert!(
        out.status.success(),
        "esmem {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn built_repo(dir: &Path) -> PathBuf {
    let repo = dir.join("repo");
    ok(&["build", fixture("sessions.jsonl").to_str().unwrap(), "-o", repo.to_str().unwrap()]);
    repo
}

#[test]
fn missing_corpus_names_the_path() {
    let out = esmem(&["segment", "/no/such/corpus.jsonl"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/corpus.jsonl"), "{err}");
}

#[test]
fn quantile_flag_is_echoed_in_header() {
    let out = ok(&["--q", "0.5", "segment", fixture("sessions.jsonl").to_str().unwrap()]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["config"]["quantile"], 0.5);
    assert_eq!(v["sessions"].as_array().unwrap().len(), 2);
}

#[test]
fn env_knob_applies_below_flags() {
    let run = |extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_esmem"));
        cmd.arg("--config").arg(fixture("config.toml")).args(extra);
        cmd.arg("segment").arg(fixture("sessions.jsonl"));
        let out = cmd.env("ESMEM_QUANTILE", "0.2").output().unwrap();
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        v["config"]["quantile"].as_f64().unwrap()
    };
    assert_eq!(run(&[]), 0.2);
    assert_eq!(run(&["--quantile", "0.9"]), 0.9);
}

#[test]
fn invalid_knob_is_rejected() {
    let out = esmem(&["--tau-c", "1.5", "segment", fixture("sessions.jsonl").to_str().unwrap()]);
    assert!(!out.status.success());
    let out = esmem(&["--jobs", "0", "segment", fixture("sessions.jsonl").to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn segment_finds_the_scripted_shifts() {
    let v: Value = serde_json::from_str(&ok(&["segment", fixture("sessions.jsonl").to_str().unwrap()])).unwrap();
    for s in v["sessions"].as_array().unwrap() {
        assert_eq!(s["boundaries"], serde_json::json!([4]));
        assert_eq!(s["events"], serde_json::json!([[1, 4], [5, 8]]));
    }
}

#[test]
fn emit_trace_writes_one_file_per_session() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces");
    ok(&[
        "segment",
        fixture("sessions.jsonl").to_str().unwrap(),
        "-o",
        dir.path().join("seg.json").to_str().unwrap(),
        "--emit-trace",
        traces.to_str().unwrap(),
    ]);
    for id in ["s1", "s2"] {
        let raw = std::fs::read_to_string(traces.join(format!("{id}.trace.json"))).unwrap();
        let v: Value = serde_json::from_str(&raw).unwrap();
        assert_eq!(v["boundaries"], serde_json::json!([4]));
    }
}

#[test]
fn query_json_has_schema_keys_and_valid_events() {
    let dir = tempfile::tempdir().unwrap();
    let repo = built_repo(dir.path());
    let out = ok(&["--json", "query", repo.to_str().unwrap(), "Where is Alice travelling in June?"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    for key in ["query", "anchors", "candidates", "selected", "context_text"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let selected = v["selected"].as_array().unwrap();
    assert!(!selected.is_empty() && selected.len() <= 3);
    for e in selected {
        let e = e.as_u64().unwrap();
        assert!((1..=4).contains(&e), "event {e}");
    }
}

#[test]
fn answer_uses_the_scripted_reply() {
    let dir = tempfile::tempdir().unwrap();
    let repo = built_repo(dir.path());
    let out = ok(&["answer", repo.to_str().unwrap(), "Which marathon is Bob training for?"]);
    assert_eq!(out.trim(), "Berlin");
}

#[test]
fn sweep_k_reports_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let repo = built_repo(dir.path());
    let csv = dir.path().join("sweep.csv");
    let out = ok(&[
        "--json",
        "sweep-k",
        repo.to_str().unwrap(),
        fixture("qa.jsonl").to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let ks: Vec<u64> = v["rows"].as_array().unwrap().iter().map(|r| r["k"].as_u64().unwrap()).collect();
    assert_eq!(ks, vec![1, 5, 10, 15, 20]);
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 6);
}

#[test]
fn eval_qa_with_judge_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let repo = built_repo(dir.path());
    let report = dir.path().join("qa.json");
    ok(&[
        "eval-qa",
        repo.to_str().unwrap(),
        fixture("qa.jsonl").to_str().unwrap(),
        "--judge",
        "-o",
        report.to_str().unwrap(),
    ]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["aggregates"]["overall"]["count"], 4);
    assert_eq!(v["judge"]["accuracy"], 1.0);
}

#[test]
fn eval_seg_requires_references() {
    let out = esmem(&["eval-seg", fixture("sessions.jsonl").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--format dialseg"));

    let out = ok(&["--json", "eval-seg", fixture("dialseg.tsv").to_str().unwrap(), "--format", "dialseg"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["aggregates"]["evaluated"], 3);
    assert_eq!(v["per_item"][0]["score"], 1.0);
}

#[test]
fn build_rejects_mismatched_segments() {
    let dir = tempfile::tempdir().unwrap();
    let seg = dir.path().join("seg.json");
    ok(&["segment", fixture("dialseg.tsv").to_str().unwrap(), "--format", "dialseg", "-o", seg.to_str().unwrap()]);
    let out = esmem(&[
        "build",
        fixture("sessions.jsonl").to_str().unwrap(),
        "--segments",
        seg.to_str().unwrap(),
        "-o",
        dir.path().join("repo").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no entry for session"));
}
