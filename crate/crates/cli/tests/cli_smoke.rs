//! End-to-end runs of the `svla` binary on a tiny budget.

use std::path::Path;
use std::process::Command;

fn svla(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_svla")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "svla {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let eval = dir.path().join("eval");
    let plots = dir.path().join("plots");

    svla(&["gen-data", "--episodes", "4", "--seed", "3", "--out", arg(&data)]);
    svla(&["train", "--data", arg(&data), "--compact", "--steps", "3", "--batch-size", "2", "--out", arg(&run)]);
    let metrics = run.join("metrics.csv");
    assert!(std::fs::read_to_string(&metrics).unwrap().lines().count() >= 4, "header plus one row per step");
    assert!(run.join("loss.svg").exists());

    assert!(run.join("weights.svla").exists() && run.join("checkpoint.json").exists());
    svla(&["eval", "--checkpoint", arg(&run), "--trials", "1", "--eval-families", "bar-0", "--max-steps", "8", "--out", arg(&eval)]);
    assert!(std::fs::read_dir(&eval).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "csv")));

    svla(&["plot", arg(&metrics), "--out", arg(&plots)]);
    assert!(std::fs::read_dir(&plots).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
}

#[test]
fn mismatched_ablation_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    svla(&["train", "--episodes", "2", "--compact", "--steps", "1", "--batch-size", "1", "--out", arg(&run)]);
    let out = Command::new(env!("CARGO_BIN_EXE_svla"))
        .args(["eval", "--checkpoint", arg(&run), "--fusion", "sequence", "--trials", "1", "--out", arg(&dir.path().join("e"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sequence"), "error names the mismatch");
}
