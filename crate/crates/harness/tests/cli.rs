mod common;

use std::path::Path;
use std::process::{Command, Output};

use cmtr::training::checkpoint_name;
use cmtr_harness::runner::SPEC_FILE;
use cmtr_harness::spec::ExperimentSpec;

fn cmtr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmtr")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, common::small_spec().to_toml().unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn train_eval_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = dir.path().join("run");
    let out = cmtr(&["train", "--config", &config, "--seed", "3", "--value", "me", "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("R1 "));
    let echoed = ExperimentSpec::load(run.join(SPEC_FILE)).unwrap();
    assert_eq!(echoed.seeds, vec![3]);
    assert_eq!(echoed.sweep.values, vec!["me".to_string()]);

    let ckpt = run.join(checkpoint_name(2));
    let eval = dir.path().join("eval");
    let out = cmtr(&["eval", "--config", &config, "--checkpoint", ckpt.to_str().unwrap(), "--out", eval.to_str().unwrap(), "--rankings"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["eval.csv", "report.txt", "rankings.jsonl", SPEC_FILE] {
        assert!(eval.join(f).exists(), "{} missing", f);
    }

    let emb = dir.path().join("emb");
    let out = cmtr(&["export-embeddings", "--config", &config, "--checkpoint", ckpt.to_str().unwrap(), "--split", "query", "--out", emb.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(emb.join("embeddings.bin").exists());
}

#[test]
fn sweep_exits_zero_and_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = cmtr(&["sweep", "--config", &config, "--axis", "lambda", "--values", "0,2", "--seed", "1", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed = ExperimentSpec::load(out_dir.join(SPEC_FILE)).unwrap();
    assert_eq!(echoed.sweep.values, vec!["0".to_string(), "2".to_string()]);
    assert!(out_dir.join("results.csv").exists());
}

#[test]
fn failed_cell_gives_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = cmtr(&["sweep", "--config", &config, "--axis", "lambda", "--values", "1e308", "--seed", "1", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_input_gives_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train.model]\ndepht = 3\n").unwrap();
    let out = cmtr(&["train", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("depht"));

    let out = cmtr(&["eval", "--checkpoint", dir.path().join("missing").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
