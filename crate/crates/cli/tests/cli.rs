use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).display().to_string()
}

fn prunebench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunebench"))
        .args(args)
        .env_remove("PRUNEBENCH_SUGGEST_URL")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = prunebench(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn stage_by_stage_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).display().to_string();
    let model = fx("model/tiny-2L.pbw");
    ok(&[
        "calibrate", "--model", &model, "--corpus", &fx("corpora/reviews.jsonl"),
        "--n-samples", "16", "--seq-len", "32", "--seed", "3", "--out", &d("stats.bin"),
    ]);
    assert!(dir.path().join("stats.bin.manifest.json").exists());

    ok(&[
        "prune", "--model", &model, "--stats", &d("stats.bin"), "--method", "ria",
        "--nm", "2:4", "--permute", "--out", &d("pruned"),
    ]);
    let summary = json(&dir.path().join("pruned/prune_summary.json"));
    assert_eq!(summary["config"]["pattern"]["n"], 2);
    assert_eq!(summary["config"]["pattern"]["m"], 4);
    for layer in summary["layers"].as_array().unwrap() {
        assert_eq!(layer["sparsity"], 0.5);
        assert!(layer["column_permutation"].is_array());
    }

    let csv = ok(&[
        "eval", "--model", &d("pruned/model.pbw"), "--task", &fx("tasks/sentiment.jsonl"),
        "--task", &fx("tasks/qa.jsonl"), "--out", &d("evald"),
    ]);
    assert!(csv.starts_with("model,"), "{csv}");
    assert!(dir.path().join("evald/eval/review-sentiment.json").exists());

    ok(&[
        "nsa", "--dense", &model, "--pruned", &d("pruned/model.pbw"),
        "--lexicon", &fx("lexicons/sentiment.json"), "--samples", &fx("nsa/samples.jsonl"),
        "--out", &d("attr"),
    ]);
    let html = std::fs::read_to_string(dir.path().join("attr/nsa/sentiment.html")).unwrap();
    assert!(html.contains("<table") || html.contains("<div"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).display().to_string();
    let model = fx("model/tiny-2L.pbw");

    let missing = prunebench(&["eval", "--model", &d("nope.pbw"), "--out", &d("x")]);
    assert_eq!(code(&missing), 2);

    let bad_flags = prunebench(&[
        "prune", "--model", &model, "--stats", &d("s"), "--method", "wanda",
        "--sparsity", "0.5", "--nm", "2:4", "--out", &d("x"),
    ]);
    assert_eq!(code(&bad_flags), 2);

    ok(&[
        "calibrate", "--model", &model, "--corpus", &fx("corpora/wiki.jsonl"),
        "--n-samples", "1", "--seq-len", "2", "--damping", "0", "--out", &d("thin.bin"),
    ]);
    let singular = prunebench(&[
        "prune", "--model", &model, "--stats", &d("thin.bin"), "--method", "sparsegpt",
        "--sparsity", "0.5", "--out", &d("sg"),
    ]);
    assert_eq!(code(&singular), 3, "{}", String::from_utf8_lossy(&singular.stderr));

    let zero_workers = Command::new(env!("CARGO_BIN_EXE_prunebench"))
        .args(["eval", "--model", &model, "--task", &fx("tasks/qa.jsonl"), "--out", &d("w")])
        .env("PRUNEBENCH_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&zero_workers), 2);

    let suggest = prunebench(&[
        "suggest", "--task", "sentiment", "--samples", &fx("nsa/samples.jsonl"),
        "--out", &d("lex.json"),
    ]);
    assert_eq!(code(&suggest), 2);
    assert!(!dir.path().join("lex.json").exists());
}

#[test]
fn run_records_overrides_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a").display().to_string();
    let b = dir.path().join("b").display().to_string();
    let config = fx("configs/pipeline.json");
    let root = ok(&[
        "run", "--config", &config, "--seed", "7", "--n-samples", "16", "--seq-len", "32",
        "--run-id", "r1", "--out", &a,
    ]);
    let root = PathBuf::from(root.trim());
    let manifest = json(&root.join("manifest.json"));
    assert_eq!(manifest["effective_config"]["seed"], 7);
    let command: Vec<String> = serde_json::from_value(manifest["command"].clone()).unwrap();
    assert!(!command.iter().any(|c| c.starts_with("--out")), "{command:?}");

    let mut again: Vec<&str> = command[1..].iter().map(String::as_str).collect();
    again.extend(["--out", &b]);
    let root_b = PathBuf::from(ok(&again).trim());
    assert_ne!(root, root_b);
    let mb = json(&root_b.join("manifest.json"));
    assert_eq!(manifest["outputs"], mb["outputs"]);
    for rel in manifest["outputs"].as_object().unwrap().keys() {
        assert_eq!(
            std::fs::read(root.join(rel)).unwrap(),
            std::fs::read(root_b.join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn sparsity_sweep_has_one_row_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "sweep", "--config", &fx("configs/sweep_sparsity.json"), "--n-samples", "16",
        "--out", &dir.path().display().to_string(),
    ]);
    let root = PathBuf::from(out.lines().last().unwrap());
    let mut r = csv::Reader::from_path(root.join("sweep.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let pattern = headers.iter().position(|h| h == "pattern").unwrap();
    let rows: Vec<_> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    let patterns: Vec<&str> = rows.iter().map(|r| &r[pattern]).collect();
    let mut distinct = patterns.clone();
    distinct.dedup();
    assert_eq!(distinct.len(), 8, "{patterns:?}");
    assert!(root.join("sweep_report.md").exists());
}
