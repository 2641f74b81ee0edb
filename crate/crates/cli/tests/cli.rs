mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use common::{lstm_pipeline, ok, roadseq};

fn error_line(out: &std::process::Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("last stderr line is not JSON ({e}): {stderr}"))
}

fn expect_failure(dir: &Path, args: &[&str], kind: &str, code: i32) -> serde_json::Value {
    let out = roadseq(dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let e = error_line(&out);
    assert_eq!(e["error"], kind, "{e}");
    assert_eq!(e["exit_code"], code, "{e}");
    e
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL: &[&str] = &["--set", "n_points=240", "--set", "lstm_epochs=2", "--set", "hidden=8", "--set", "window=20"];

#[test]
fn pipeline_smoke_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    lstm_pipeline(dir.path(), &[]);
    let elapsed = start.elapsed();
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    let avg_f = metrics["avg_f"].as_f64().expect("avg_f field");
    assert!((0.0..=1.0).contains(&avg_f));
    for class in ["RS", "MCB", "CB"] {
        for key in ["precision", "recall", "f", "tp", "fp", "fn", "tn"] {
            assert!(metrics[class][key].is_number(), "{class}.{key} missing");
        }
    }
    assert!(elapsed.as_secs() < 300, "default pipeline took {elapsed:?}");
    let history = fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 31);
}

#[test]
fn every_run_logs_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--seed", "42", "synth", "--labels", "l.csv", "--features", "f.jsonl", "--n-points", "30"]);
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("roadseq: command synth"), "{log}");
    assert!(log.contains("roadseq: seed 42"), "{log}");
    assert!(log.contains("config n_points = 30"), "{log}");
    assert!(log.contains("config window = 50"), "{log}");
}

#[test]
fn evaluate_length_mismatch_names_both_lengths() {
    let dir = tempfile::tempdir().unwrap();
    lstm_pipeline(dir.path(), SMALL);
    let truth = fs::read_to_string(dir.path().join("test.csv")).unwrap();
    let short: String = truth.lines().take(11).map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("short.csv"), short).unwrap();
    let e = expect_failure(
        dir.path(),
        &["evaluate", "--predictions", "pred.csv", "--labels", "short.csv"],
        "length_mismatch",
        6,
    );
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("240") && msg.contains("10"), "{msg}");
}

#[test]
fn errors_map_to_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--labels", "l.csv", "--features", "f.jsonl", "--n-points", "60"]);

    expect_failure(d, &["--set", "bogus=1", "synth"], "config", 3);
    expect_failure(d, &["--set", "window=0", "synth"], "config", 3);
    expect_failure(d, &["--set", "lstm_lr=0.5", "synth"], "config", 3);
    fs::write(d.join("dup.cfg"), "window = 10\nwindow = 12\n").unwrap();
    let e = expect_failure(d, &["--config", "dup.cfg", "synth"], "config", 3);
    assert!(e["message"].as_str().unwrap().contains("dup.cfg:2"), "{e}");
    expect_failure(d, &["--config", "missing.cfg", "synth"], "io", 4);

    expect_failure(d, &["--set", "window", "synth"], "usage", 2);
    expect_failure(d, &["evaluate", "--labels", "l.csv"], "usage", 2);
    expect_failure(d, &["evaluate", "--predictions", "nope.csv", "--labels", "l.csv"], "io", 4);

    fs::write(d.join("bad.csv"), "image_id,edge_id\nx,y\n").unwrap();
    expect_failure(d, &["train-lstm", "--labels", "bad.csv", "--features", "f.jsonl", "--model", "m.bin"], "parse", 5);
    fs::write(d.join("junk.bin"), "not a model").unwrap();
    let r = expect_failure(
        d,
        &["predict", "--lstm-model", "junk.bin", "--labels", "l.csv", "--features", "f.jsonl", "--predictions", "p.csv"],
        "container",
        5,
    );
    assert!(!r["message"].as_str().unwrap().is_empty());

    expect_failure(
        d,
        &["--set", "feature_dim=8", "train-lstm", "--labels", "l.csv", "--features", "f.jsonl", "--model", "m.bin"],
        "dimension_mismatch",
        6,
    );

    let out = roadseq(d, &["synth", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn outputs_never_overwrite_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--labels", "l.csv", "--features", "f.jsonl", "--n-points", "60"]);
    let before = snapshot(d);
    expect_failure(
        d,
        &["--set", "lstm_epochs=1", "train-lstm", "--labels", "l.csv", "--features", "f.jsonl", "--model", "f.jsonl"],
        "usage",
        2,
    );
    expect_failure(d, &["evaluate", "--predictions", "l.csv", "--labels", "l.csv", "--metrics", "./l.csv"], "usage", 2);
    expect_failure(d, &["export-map", "--predictions", "l.csv", "--map", "l.csv"], "usage", 2);
    assert_eq!(before, snapshot(d));
}

#[test]
fn reading_commands_leave_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    lstm_pipeline(d, SMALL);
    let before = snapshot(d);
    ok(d, &["predict", "--lstm-model", "lstm.bin", "--labels", "test.csv", "--features", "test.jsonl", "--predictions", "out/p2.csv", "--set", "window=20"]);
    ok(d, &["evaluate", "--predictions", "pred.csv", "--labels", "test.csv", "--metrics", "out/m2.json"]);
    ok(d, &["export-map", "--predictions", "pred.csv", "--map", "out/map2.geojson"]);
    let after = snapshot(d);
    for (name, bytes) in &before {
        assert_eq!(after.get(name), Some(bytes), "{name} changed");
    }
    assert_eq!(after["out/p2.csv"], before["pred.csv"]);
    assert_eq!(after["out/m2.json"], before["metrics.json"]);
    assert_eq!(after["out/map2.geojson"], before["map.geojson"]);
}

#[test]
fn sample_and_url_gen() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let network = r#"{"type":"FeatureCollection","features":[
        {"type":"Feature","properties":{"id":"a"},"geometry":{"type":"LineString","coordinates":[[0.0,0.0],[0.001,0.0]]}},
        {"type":"Feature","properties":{"id":7},"geometry":{"type":"LineString","coordinates":[[0.001,0.0],[0.001,0.002]]}}
    ]}"#;
    fs::write(d.join("net.geojson"), network).unwrap();
    ok(d, &["sample", "--network", "net.geojson", "--points", "pts.csv"]);
    let pts = fs::read_to_string(d.join("pts.csv")).unwrap();
    // 111.2 m and 222.4 m edges at 20 m spacing.
    assert_eq!(pts.lines().count(), 1 + 6 + 12, "{pts}");
    assert!(pts.starts_with("edge_id,seq_index,chainage_m,lat,lon,heading_deg\n"));

    let out = ok(d, &["url-gen", "--points", "pts.csv", "--key", "k&y", "--size", "320x240"]);
    let urls = String::from_utf8(out.stdout).unwrap();
    assert_eq!(urls.lines().count(), 18);
    let first = urls.lines().next().unwrap();
    assert!(first.contains("size=320x240") && first.contains("location=0.000000,0.000000"), "{first}");
    assert!(first.contains("key=k%26y"), "{first}");

    expect_failure(d, &["url-gen", "--points", "pts.csv", "--key", "k", "--size", "big"], "usage", 2);
    fs::write(d.join("bad.geojson"), "{}").unwrap();
    expect_failure(d, &["sample", "--network", "bad.geojson", "--points", "p.csv"], "invalid_input", 5);
}

#[test]
fn cnn_frame_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = ["--set", "n_points=40", "--set", "cnn_epochs=1", "--set", "image_size=16"];
    let run = |cmd: &[&str]| common::ok_owned(d, &common::with(cmd, &s));
    run(&["synth", "--labels", "l.csv", "--features", "f.jsonl", "--manifest", "frames/m.csv"]);
    run(&["train-cnn", "--labels", "l.csv", "--manifest", "frames/m.csv", "--model", "cnn.bin"]);
    run(&["predict", "--cnn-model", "cnn.bin", "--labels", "l.csv", "--manifest", "frames/m.csv", "--predictions", "p.csv"]);
    let preds = fs::read_to_string(d.join("p.csv")).unwrap();
    assert_eq!(preds.lines().count(), 41);
    run(&["evaluate", "--predictions", "p.csv", "--labels", "l.csv"]);
}

fn help_flags(args: &[&str]) -> BTreeSet<String> {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), args);
    let text = String::from_utf8(out.stdout).unwrap();
    text.split(|c: char| c.is_whitespace() || c == ',' || c == '[' || c == ']')
        .filter(|w| w.starts_with("--") && w.len() > 2)
        .map(|w| w.trim_end_matches(['.', '`', ')']).to_string())
        .filter(|w| w.chars().skip(2).all(|c| c.is_ascii_lowercase() || c == '-'))
        .collect()
}

#[test]
fn help_enumerates_every_flag() {
    let global = ["--config", "--set", "--seed", "--help"];
    let top = help_flags(&["--help"]);
    for f in global.iter().chain(&["--version"]) {
        assert!(top.contains(*f), "top-level help lacks {f}");
    }
    let commands: &[(&str, &[&str])] = &[
        ("sample", &["--network", "--points", "--interval"]),
        ("url-gen", &["--points", "--key", "--size", "--out"]),
        ("synth", &["--labels", "--features", "--manifest", "--n-points"]),
        ("train-cnn", &["--labels", "--manifest", "--model", "--history", "--epochs"]),
        ("extract-features", &["--cnn-model", "--labels", "--manifest", "--features"]),
        (
            "train-lstm",
            &["--mode", "--labels", "--features", "--model", "--history", "--epochs", "--val-labels", "--val-features"],
        ),
        ("predict", &["--lstm-model", "--cnn-model", "--labels", "--features", "--manifest", "--predictions"]),
        ("evaluate", &["--predictions", "--labels", "--metrics"]),
        ("export-map", &["--predictions", "--map"]),
    ];
    for (cmd, flags) in commands {
        let listed = help_flags(&[cmd, "--help"]);
        let expected: BTreeSet<String> = flags.iter().chain(&global).map(|s| s.to_string()).collect();
        assert_eq!(listed, expected, "{cmd} --help");
    }
}
