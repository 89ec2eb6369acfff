use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cli(out: &Path, args: &[&str]) -> Output {
    let output = Command::new(env!("CARGO_BIN_EXE_speech-refine"))
        .arg("--out")
        .arg(out)
        .args(["--log", "warn"])
        .args(args)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn offline_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");
    let manifest = data.join("manifest.jsonl");
    let m = manifest.to_str().unwrap();

    cli(&data, &["gen-fixtures", "--per-class", "24", "--profile-clip-s", "4"]);
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 96);
    assert!(data.join("profile/long.wav").exists());

    let out = cli(&runs, &["train-sir", "--manifest", m, "--d", "8", "--epochs", "40", "--min-per-class", "20"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("overall"));
    let train = read_json(&runs.join("train_sir.json"));
    assert_eq!(train["n_train"].as_u64().unwrap() + train["n_test"].as_u64().unwrap(), 96);
    let model = runs.join("sir_model.json");
    assert!(model.exists());
    let model = model.to_str().unwrap();

    cli(&runs, &["eval-text", "--manifest", m, "--seeds", "2", "--variants", "rule,with-class"]);
    let text = read_json(&runs.join("eval_text.json"));
    assert_eq!(text["rows"].as_array().unwrap().len(), 3);
    assert!(runs.join("eval_text.txt").exists());

    cli(&runs, &["eval-speech", "--manifest", m, "--model", model, "--variants", "rule"]);
    assert!(runs.join("listening/manifest.json").exists());
    let template = std::fs::read_to_string(runs.join("listening/ratings_template.csv")).unwrap();
    assert_eq!(template.lines().count(), 97);

    let filled: String = template
        .lines()
        .enumerate()
        .map(|(i, line)| if i == 0 { format!("{line}\n") } else { format!("{},3,0\n", line.trim_end_matches(',')) })
        .collect();
    let ratings = dir.path().join("ratings.csv");
    std::fs::write(&ratings, filled).unwrap();
    cli(
        &runs,
        &[
            "ingest-ratings",
            "--ratings",
            ratings.to_str().unwrap(),
            "--key",
            runs.join("listening_key.json").to_str().unwrap(),
            "--report",
            runs.join("eval_speech.json").to_str().unwrap(),
        ],
    );
    assert_eq!(read_json(&runs.join("ratings.json"))["n_rows"], 96);
    assert!(runs.join("eval_speech_rated.txt").exists());

    let long = data.join("profile/manifest.jsonl");
    cli(&runs, &["profile", "--manifest", long.to_str().unwrap(), "--trials", "2", "--model", model]);
    let profile = read_json(&runs.join("profile.json"));
    assert_eq!(profile["latency"]["n_trials"], 2);
    assert!(profile["latency"]["mean_rtf"].as_f64().unwrap() < 1.0);
    let shares = std::fs::read_to_string(runs.join("stage_shares.csv")).unwrap();
    assert!(shares.starts_with("stage,mean_s,max_s,fraction"));
}

#[test]
fn bad_input_exits_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"sample_id\": \"a\"}\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_speech-refine"))
        .args(["--out", dir.path().to_str().unwrap(), "eval-text", "--manifest", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("line 1"));
}
