#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn roadseq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadseq"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to launch roadseq")
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = roadseq(dir, args);
    assert!(
        out.status.success(),
        "roadseq {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

pub fn ok_owned(dir: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(dir, &refs)
}

/// synth (train and test corridors), train-lstm, predict, evaluate and
/// export-map on features straight from the generator.
pub fn lstm_pipeline(dir: &Path, settings: &[&str]) {
    let run = |cmd: &[&str]| ok_owned(dir, &with(cmd, settings));
    run(&["synth", "--labels", "train.csv", "--features", "train.jsonl"]);
    run(&["synth", "--labels", "test.csv", "--features", "test.jsonl", "--seed", "1000"]);
    run(&["train-lstm", "--labels", "train.csv", "--features", "train.jsonl", "--model", "lstm.bin", "--history", "history.csv"]);
    run(&["predict", "--lstm-model", "lstm.bin", "--labels", "test.csv", "--features", "test.jsonl", "--predictions", "pred.csv"]);
    run(&["evaluate", "--predictions", "pred.csv", "--labels", "test.csv", "--metrics", "metrics.json"]);
    run(&["export-map", "--predictions", "pred.csv", "--map", "map.geojson"]);
}

/// The pixel route: rendered frames, CNN training and feature extraction
/// ahead of the sequence model.
pub fn full_pipeline(dir: &Path, settings: &[&str]) {
    let run = |cmd: &[&str]| ok_owned(dir, &with(cmd, settings));
    run(&["synth", "--labels", "train.csv", "--features", "gen_train.jsonl", "--manifest", "train/manifest.csv"]);
    run(&["synth", "--labels", "test.csv", "--features", "gen_test.jsonl", "--manifest", "test/manifest.csv", "--seed", "1000"]);
    run(&["train-cnn", "--labels", "train.csv", "--manifest", "train/manifest.csv", "--model", "cnn.bin", "--history", "cnn_history.csv"]);
    run(&["extract-features", "--cnn-model", "cnn.bin", "--labels", "train.csv", "--manifest", "train/manifest.csv", "--features", "train.jsonl"]);
    run(&["extract-features", "--cnn-model", "cnn.bin", "--labels", "test.csv", "--manifest", "test/manifest.csv", "--features", "test.jsonl"]);
    run(&["train-lstm", "--labels", "train.csv", "--features", "train.jsonl", "--model", "lstm.bin", "--history", "history.csv"]);
    run(&["predict", "--lstm-model", "lstm.bin", "--labels", "test.csv", "--features", "test.jsonl", "--predictions", "pred.csv"]);
    run(&["evaluate", "--predictions", "pred.csv", "--labels", "test.csv", "--metrics", "metrics.json"]);
    run(&["export-map", "--predictions", "pred.csv", "--map", "map.geojson"]);
}
