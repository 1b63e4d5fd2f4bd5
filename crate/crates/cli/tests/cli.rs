use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &["--set", "synth.molecules=40", "--set", "synth.max_atoms=12"];
const QUICK: &[&str] = &["--set", "train.epochs=3", "--set", "model.widths=[8]", "--set", "model.head=[8]"];

fn chemigraph(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chemigraph"))
        .current_dir(dir)
        .env_remove("CHEMIGRAPH_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = chemigraph(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with(base: &[&str], extra: &[&'static str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(dir: &Path, args: Vec<String>) -> Output {
    ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn trailer(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

/// Synthesizes a small dataset and trains on it, seeded.
fn pipeline(dir: &Path, seed: &str) {
    run(dir, with(&["synth", "--seed", seed, "--out", "data.jsonl"], SMALL));
    run(dir, with(&["train", "--seed", seed, "--train", "data.jsonl", "--out", "run"], QUICK));
    ok(dir, &["predict", "--seed", seed, "--checkpoint", "run/checkpoints/epoch-0003.ckpt", "--input", "data.jsonl", "--out", "preds.jsonl"]);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = chemigraph(dir.path(), &["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(trailer(&out)["code"], 1);
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = chemigraph(dir.path(), &["featurize", "--input", "absent.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(trailer(&out)["error"].as_str().unwrap().contains("absent.jsonl"));
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert!(String::from_utf8_lossy(&ok(dir.path(), &["--help"]).stdout).contains("inspect-batchplan"));
    assert!(String::from_utf8_lossy(&ok(dir.path(), &["--version"]).stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn seeded_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), "7");
    pipeline(b.path(), "7");
    for file in ["preds.jsonl", "run/checkpoints/epoch-0003.ckpt", "run/epochs.jsonl"] {
        let (x, y) = (std::fs::read(a.path().join(file)).unwrap(), std::fs::read(b.path().join(file)).unwrap());
        assert!(x == y, "{file} differs");
    }
}

#[test]
fn predictions_cover_every_molecule_in_order() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "3");
    let preds = std::fs::read_to_string(dir.path().join("preds.jsonl")).unwrap();
    let data = std::fs::read_to_string(dir.path().join("data.jsonl")).unwrap();
    let ids: Vec<String> = data
        .lines()
        .filter_map(|l| Some(serde_json::from_str::<serde_json::Value>(l).unwrap()["id"].as_str()?.to_string()))
        .collect();
    let lines: Vec<serde_json::Value> = preds.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["seed"], 3);
    assert_eq!(lines.len(), ids.len() + 1);
    for (line, id) in lines[1..].iter().zip(&ids) {
        assert_eq!(line["id"], id.as_str());
        assert!(line["predictions"]["y"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), with(&["synth", "--seed", "5", "--out", "flag.jsonl"], SMALL));
    let env = Command::new(env!("CARGO_BIN_EXE_chemigraph"))
        .current_dir(dir.path())
        .env("CHEMIGRAPH_SEED", "5")
        .args(with(&["synth", "--out", "env.jsonl"], SMALL))
        .output()
        .unwrap();
    assert!(env.status.success());
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("flag.jsonl"), read("env.jsonl"));
}

#[test]
fn divergence_exits_with_the_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), with(&["synth", "--out", "data.jsonl"], SMALL));
    let out = chemigraph(
        dir.path(),
        &["train", "--train", "data.jsonl", "--set", "train.adam.lr=1e300", "--set", "train.epochs=5", "--out", "run"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(trailer(&out)["code"], 3);
}

#[test]
fn finetune_reads_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "1");
    let out = run(
        dir.path(),
        with(&["finetune", "--manifest", "run/pool.json", "--k", "2", "--train", "data.jsonl", "--out", "ens"], QUICK),
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["members"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("ens/ensemble.ckpt").exists());
}

#[test]
fn eval_report_records_version_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "2");
    let out = ok(
        dir.path(),
        &["eval", "--seed", "2", "--checkpoint", "run/checkpoints/epoch-0003.ckpt", "--train", "data.jsonl", "--out", "eval.json"],
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("rmse"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 2);
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
    assert!(report["report"]["similarity"]["y"]["bins"].is_array());
}

#[test]
fn batch_plan_is_printed() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "4");
    let out = ok(
        dir.path(),
        &["inspect-batchplan", "--checkpoint", "run/checkpoints/epoch-0003.ckpt", "--input", "data.jsonl", "--batch", "8"],
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("# {"));
    assert!(text.contains("buckets"), "{text}");
}
