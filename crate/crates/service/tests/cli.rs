use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY_MODEL: &str = r#"
[model]
d_model = 8
n_layers = 1
n_heads = 2
ffn_dim = 16
d_max = 16
"#;

fn whatif(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_whatif"));
    for (key, _) in std::env::vars() {
        if key.starts_with("WHATIF_") {
            cmd.env_remove(key);
        }
    }
    cmd.args(args).envs(env.iter().copied());
    cmd.output().unwrap()
}

fn stderr_json(output: &Output) -> Value {
    let text = String::from_utf8_lossy(&output.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(whatif(&[], &[]).status.code(), Some(2));
    assert_eq!(whatif(&["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(whatif(&["train", "--steps", "many"], &[]).status.code(), Some(2));
}

#[test]
fn missing_output_directory_is_a_config_error() {
    let output = whatif(&["generate-prior", "--count", "1"], &[]);
    assert_eq!(output.status.code(), Some(2));
    assert_eq!(stderr_json(&output)["error"]["kind"], "config");
}

#[test]
fn malformed_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "bad.toml", "seed = \"three\"\n");
    let out = dir.path().join("out");
    let output = whatif(
        &["--config", &config, "generate-prior", "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(output.status.code(), Some(2));
    assert_eq!(stderr_json(&output)["error"]["kind"], "config");
    let unknown = write(dir.path(), "unknown.toml", "sed = 3\n");
    let output = whatif(&["--config", &unknown, "generate-prior", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn flag_beats_env_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "run.toml", "seed = 5\n[generate]\ncount = 2\n");
    let seed_of = |args: &[&str], env: &[(&str, &str)], name: &str| {
        let out = dir.path().join(name);
        let mut full = vec!["--config", &config, "generate-prior", "--out", out.to_str().unwrap()];
        full.extend_from_slice(args);
        let output = whatif(&full, env);
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
        let m = manifest(&out);
        assert_eq!(m["run"]["count"], 2);
        m["run"]["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&["--seed", "7"], &[("WHATIF_SEED", "6")], "a"), 7);
    assert_eq!(seed_of(&[], &[("WHATIF_SEED", "6")], "b"), 6);
    assert_eq!(seed_of(&[], &[], "c"), 5);
}

#[test]
fn config_file_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "run.toml", "seed = 9\n[generate]\ncount = 1\n");
    let out = dir.path().join("out");
    let output = whatif(&["generate-prior"], &[("WHATIF_CONFIG", &config), ("WHATIF_OUT", out.to_str().unwrap())]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert_eq!(manifest(&out)["run"]["seed"], 9);
}

#[test]
fn zero_steps_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "tiny.toml", TINY_MODEL);
    let out = dir.path().join("train");
    let output = whatif(
        &["--config", &config, "train", "--steps", "0", "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(out.join("checkpoint.ckpt").exists());
    assert_eq!(std::fs::read_to_string(out.join("losses.csv")).unwrap(), "step,loss,learning_rate\n");
    let m = manifest(&out);
    assert_eq!(m["run"]["command"], "train");
    assert_eq!(m["run"]["train"]["steps"], 0);
    assert!(m["outputs"]["checkpoint.ckpt"].is_string());
}

#[test]
fn oracle_scores_zero_and_icl_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    let output = whatif(
        &["evaluate", "--rows", "200", "--estimators", "oracle,zero", "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let oracle: Vec<f64> = csv
        .lines()
        .filter(|l| l.contains(",oracle,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(oracle.len(), 12);
    assert!(oracle.iter().all(|&v| v == 0.0));
    let output = whatif(
        &["evaluate", "--rows", "200", "--estimators", "icl-model", "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let output = whatif(
        &["export-scm", "--seed", "3", "--samples", "50", "--out", first.to_str().unwrap()],
        &[],
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let manifest_path = first.join("manifest.json");
    let second = dir.path().join("second");
    let output = whatif(
        &["replay", manifest_path.to_str().unwrap(), "--out", second.to_str().unwrap()],
        &[],
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    for name in ["scm.json", "samples.csv", "manifest.json"] {
        assert_eq!(
            std::fs::read(first.join(name)).unwrap(),
            std::fs::read(second.join(name)).unwrap(),
            "{name}"
        );
    }

    let mut tampered = manifest(&first);
    tampered["outputs"]["scm.json"] = Value::String("0".repeat(64));
    let tampered_path = write(dir.path(), "tampered.json", &tampered.to_string());
    let third = dir.path().join("third");
    let output = whatif(&["replay", &tampered_path, "--out", third.to_str().unwrap()], &[]);
    assert_eq!(output.status.code(), Some(3));
    assert_eq!(stderr_json(&output)["error"]["kind"], "mismatch");
}
