use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ticketlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ticketlab"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().expect("stderr not empty");
    serde_json::from_str(last).expect("stderr ends with a JSON error")
}

const TINY: &str = r#"{
  "model": {"base_dim": 4, "prompt_spatial": [4, 4, 4]},
  "prune": {"max_rounds": 2},
  "train": {"epochs": 2, "warmup": 1, "batch_size": 2, "eta_base": 0.001, "patch": 16},
  "data": {"recipe": {"tasks": ["denoise", "derain"], "size": 16, "n_train": 6, "n_test": 2, "seed": 5}, "dir": "data"},
  "report": {"run_dir": "run"}
}"#;

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    [&["--config", "tiny.json"][..], extra].concat()
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();

    let gen = stdout_json(&ticketlab(dir, &with(&["datagen"])));
    assert_eq!(gen["sets"].as_array().unwrap().len(), 9);
    let again = stderr_json(&ticketlab(dir, &with(&["datagen"])));
    assert_eq!(again["error"], "invalid_argument");

    let missing = stderr_json(&ticketlab(dir, &with(&["oneshot", "--fraction", "0.5"])));
    assert_eq!(missing["error"], "checkpoint");

    let dense = stdout_json(&ticketlab(dir, &with(&["train"])));
    assert_eq!(dense["rounds"].as_array().unwrap().len(), 1);
    let lth = stdout_json(&ticketlab(dir, &with(&["lth"])));
    let rounds = lth["rounds"].as_array().unwrap();
    assert_eq!(rounds.len(), 3);
    assert_eq!(rounds[0], dense["rounds"][0], "lth continues from the dense round");

    let os = stdout_json(&ticketlab(dir, &with(&["oneshot", "--kind", "random", "--fraction", "0.36"])));
    assert_eq!(os["kind"], "random");

    let ev = stdout_json(&ticketlab(dir, &with(&["eval", "--checkpoint", "run/round_002"])));
    assert_eq!(ev["round"], 2);
    assert!(ev["compression"].as_str().unwrap().starts_with('x'));
    assert_eq!(ev["eval"]["psnr"], rounds[2]["psnr"]);

    let rep = stdout_json(&ticketlab(dir, &with(&["report"])));
    assert_eq!(&rep, &lth["rounds"]);
    let csv = std::fs::read_to_string(dir.join("run/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    // A different seed is a different experiment.
    let clash = stderr_json(&ticketlab(dir, &with(&["--seed", "9", "lth"])));
    assert_eq!(clash["error"], "digest_mismatch");
    let forced = stderr_json(&ticketlab(dir, &with(&["--seed", "9", "eval", "--checkpoint", "run/round_001"])));
    assert_eq!(forced["error"], "digest_mismatch");
    stdout_json(&ticketlab(
        dir,
        &with(&["--seed", "9", "eval", "--checkpoint", "run/round_001", "--override-digest"]),
    ));
}

#[test]
fn describe_and_bad_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let d = stdout_json(&ticketlab(dir, &["describe"]));
    assert_eq!(d["total"], 151_812);
    std::fs::write(dir.join("bad.json"), r#"{"prune": {"rate": 1.5}}"#).unwrap();
    let e = stderr_json(&ticketlab(dir, &["--config", "bad.json", "describe"]));
    assert_eq!(e["error"], "invalid_argument");
    let e = stderr_json(&ticketlab(dir, &["--config", "nope.json", "describe"]));
    assert_eq!(e["error"], "io");
}
