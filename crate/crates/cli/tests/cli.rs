use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[corpus]
size = 256

[model]
width = 8
blocks = 1
cond_dim = 8
sta_tokens = 3
time_freqs = 4

[train]
steps = 6
batch_size = 4
val_every = 3
val_size = 4

[sample]
count = 3

[eval]
prompts = 12
reps = 2
mm_prompts = 1
diversity_pairs = 10
"#;

fn antlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_antlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = antlab(dir, args);
    assert!(
        out.status.success(),
        "antlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn pipeline_reruns_identically_from_echoes() {
    let dir = setup();
    let d = dir.path();
    for cmd in ["corpus", "train", "sample", "eval"] {
        ok(d, &["--config", "small.toml", cmd]);
    }
    let files = ["runs/out/motions.jsonl", "runs/out/cost.csv", "runs/out/metrics.csv", "runs/out/train_log.csv", "runs/model.ckpt"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(d, f)).collect();
    let echoes: Vec<Vec<u8>> = ["corpus", "train", "sample", "eval"]
        .iter()
        .map(|c| read(d, &format!("runs/out/{c}.config.toml")))
        .collect();
    fs::rename(d.join("runs"), d.join("first")).unwrap();
    for (cmd, echo) in ["corpus", "train", "sample", "eval"].iter().zip(&echoes) {
        let path = d.join(format!("{cmd}.echo.toml"));
        fs::write(&path, echo).unwrap();
        ok(d, &["--config", path.to_str().unwrap(), cmd]);
    }
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&read(d, f), bytes, "{f} differs");
    }
    let cost = String::from_utf8(read(d, "runs/out/cost.csv")).unwrap();
    assert_eq!(cost.lines().count(), 4);
    assert!(cost.lines().skip(1).all(|l| l.ends_with(",5,10,15")), "{cost}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "small.toml", "corpus"]);
    ok(d, &["--config", "small.toml", "train"]);
    let full_ck = read(d, "runs/model.ckpt");
    let full_log = read(d, "runs/out/train_log.csv");
    ok(d, &["--config", "small.toml", "train", "--until", "2"]);
    ok(d, &["--config", "small.toml", "train", "--resume"]);
    assert_eq!(read(d, "runs/out/train_log.csv"), full_log);
    assert_eq!(read(d, "runs/model.ckpt"), full_ck);
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = antlab(dir.path(), &["--config", "bad.toml", "corpus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn invalid_inputs_exit_with_code_two() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "small.toml", "corpus"]);
    ok(d, &["--config", "small.toml", "train", "--steps", "1"]);
    let cases: [&[&str]; 4] = [
        &["--config", "small.toml", "sample", "--prompt", "moonwalk"],
        &["--config", "small.toml", "sample", "--omega-max", "-1"],
        &["--config", "small.toml", "eval", "--split", "holdout"],
        &["--config", "small.toml", "attention", "--checkpoint", "missing.ckpt"],
    ];
    for args in cases {
        assert_eq!(antlab(d, args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn flags_override_config_in_echo() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "small.toml", "--seed", "9", "corpus", "--size", "40"]);
    let echo = String::from_utf8(read(d, "runs/out/corpus.config.toml")).unwrap();
    let v: toml::Value = toml::from_str(&echo).unwrap();
    assert_eq!(v["seed"].as_integer(), Some(9));
    assert_eq!(v["corpus"]["size"].as_integer(), Some(40));
    assert_eq!(v["model"]["width"].as_integer(), Some(8));
}

#[test]
fn explicit_prompts_are_sampled() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "small.toml", "corpus"]);
    ok(d, &["--config", "small.toml", "train", "--steps", "1"]);
    ok(
        d,
        &["--config", "small.toml", "sample", "--prompt", "sine left fast", "--prompt", "arc right", "--skip-frac", "1"],
    );
    let motions = String::from_utf8(read(d, "runs/out/motions.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = motions.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["prompt"], "arc right");
    let cost = String::from_utf8(read(d, "runs/out/cost.csv")).unwrap();
    assert!(cost.lines().skip(1).all(|l| l.ends_with(",10,10,20")), "{cost}");
}
