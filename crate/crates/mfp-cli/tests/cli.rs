//! CLI contract tests: exit codes, dependency errors, override semantics.

use std::path::Path;
use std::process::{Command, Output};

fn mfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfp"))
        .args(args)
        .output()
        .expect("spawn mfp")
}

#[test]
fn evaluate_without_predict_artifacts_names_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let out = mfp(&["evaluate", "--out-dir", dir]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("predict"),
        "stderr must name the producer: {stderr}"
    );
}

#[test]
fn featurize_without_ingest_names_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let out = mfp(&["featurize", "--out-dir", dir]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("ingest"),
        "stderr must name the producer: {stderr}"
    );
}

#[test]
fn invalid_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "split_time = 100\ndata_end = 50\n").unwrap();
    let out = mfp(&["gen-synth", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_input_exits_with_code_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // events.jsonl present but the failure file is missing
    std::fs::write(dir.join("events.jsonl"), "").unwrap();
    let out = mfp(&["ingest", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn lead_override_changes_only_the_lead_in_the_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let small = ["--n-dimms", "10", "--fault-fraction", "0.0"];

    let mut args_a = vec!["gen-synth", "--out-dir", a.to_str().unwrap()];
    args_a.extend_from_slice(&small);
    assert!(mfp(&args_a).status.success());

    let mut args_b = vec![
        "gen-synth",
        "--out-dir",
        b.to_str().unwrap(),
        "--lead",
        "3600",
    ];
    args_b.extend_from_slice(&small);
    assert!(mfp(&args_b).status.success());

    let read_meta = |p: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(p.join("gen_synth_meta.json")).unwrap())
            .unwrap()
    };
    let mut echo_a = read_meta(&a);
    let echo_b = read_meta(&b);
    assert_eq!(echo_b["config"]["eval"]["lead_s"], 3600);
    echo_a["config"]["eval"]["lead_s"] = 3600.into();
    assert_eq!(echo_a, echo_b, "--lead must change nothing but the lead");
}

#[test]
fn ingest_merges_multiple_log_files_sorted() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let record = |uid: &str, t: i64| {
        format!(
            r#"{{"dimm_uid":"{uid}","rankid":0,"deviceid":0,"bankgroupid":0,"bankid":0,"rowid":1,"columnid":1,"beat_info":1,"error_type":0,"log_time":{t}}}"#
        )
    };
    // interleaved DIMMs across two files, out of order
    std::fs::write(
        dir.join("a.jsonl"),
        format!("{}\n{}\n", record("d2", 300), record("d1", 200)),
    )
    .unwrap();
    std::fs::write(
        dir.join("b.jsonl"),
        format!("{}\n{}\n", record("d1", 100), record("d2", 50)),
    )
    .unwrap();
    std::fs::write(dir.join("failures.csv"), "dimm_uid,failure_time_epoch_s\n").unwrap();
    std::fs::write(
        dir.join("pipeline.toml"),
        "out_dir = \".\"\nsplit_time = 150\ndata_end = 400\n[paths]\nce_logs = [\"a.jsonl\", \"b.jsonl\"]\nfailures = \"failures.csv\"\n",
    )
    .unwrap();
    let out = mfp(&[
        "ingest",
        "--config",
        dir.join("pipeline.toml").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let events = std::fs::read_to_string(dir.join("events.jsonl")).unwrap();
    let order: Vec<(String, i64)> = events
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (
                v["dimm_uid"].as_str().unwrap().to_string(),
                v["log_time"].as_i64().unwrap(),
            )
        })
        .collect();
    assert_eq!(
        order,
        vec![
            ("d1".to_string(), 100),
            ("d1".to_string(), 200),
            ("d2".to_string(), 50),
            ("d2".to_string(), 300),
        ]
    );
}

#[test]
fn init_config_writes_a_loadable_default() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("pipeline.toml");
    let out = mfp(&["init-config", path.to_str().unwrap()]);
    assert!(out.status.success());
    let raw = std::fs::read_to_string(&path).unwrap();
    assert!(raw.contains("split_time"));
    assert!(raw.contains("[geometry]"));
}
