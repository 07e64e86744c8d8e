//! End-to-end runs of the `maple` binary: exit codes, file formats and
//! reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures");

const TINY: &str = "\
model:
  encoder: {image_size: 16, channels: 3, patch_size: 8, dim: 16, depth: 1, heads: 2, mlp_ratio: 2}
  embed_dim: 32
  dropout: 0.0
train: {lr: 1.0e-3, warmup_epochs: 1, epochs: 3, batch_size: 8, seed: 5}
data:
  hierarchy: dfc15
  synth: {n: 48, seed: 1, image_size: 16, patch: 8, jitter: 1}
fewshot: {ks: [2], repeats: 1}
";

fn maple(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maple"))
        .args(args)
        .env_remove("MAPLE_SEED")
        .env_remove("MAPLE_EMBED_URL")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> String {
    format!("{FIXTURES}/{name}")
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.yaml");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn ok(out: Output) -> String {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&maple(&[])), 1);
    assert_eq!(code(&maple(&["train"])), 1);
    assert_eq!(code(&maple(&["hierarchy", "frobnicate"])), 1);
    assert_eq!(code(&maple(&["--help"])), 0);
}

#[test]
fn hierarchy_validate_reports_level_sizes() {
    let text = ok(maple(&["hierarchy", "validate", &fixture("aid.yaml")]));
    assert!(text.contains("[4, 9, 15, 7]") && text.contains("17 leaves"), "{text}");
    let text = ok(maple(&["hierarchy", "validate", &fixture("dfc15.yaml")]));
    assert!(text.contains("[3, 7, 7]") && text.contains("8 leaves"), "{text}");
}

#[test]
fn invalid_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.yaml");
    std::fs::write(&bad, "levels: 3\nnodes:\n  - {name: a, level: 1}\n  - {name: b, level: 3, parents: [a]}\n").unwrap();
    let out = maple(&["hierarchy", "validate", s(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains('b'));

    let cfg = dir.path().join("cfg.yaml");
    std::fs::write(&cfg, "train: {epochs: 2, warmup_epochs: 4}\n").unwrap();
    assert_eq!(code(&maple(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))])), 2);

    let cfg = dir.path().join("typo.yaml");
    std::fs::write(&cfg, "model: {aggregator: median}\n").unwrap();
    assert_eq!(code(&maple(&["report", "params", "--config", s(&cfg)])), 2);
}

#[test]
fn missing_files_are_runtime_failures() {
    assert_eq!(code(&maple(&["hierarchy", "validate", "/nonexistent/h.yaml"])), 3);
}

#[test]
fn prompts_as_json() {
    let text = ok(maple(&["hierarchy", "prompts", &fixture("dfc15.yaml"), "--json"]));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    assert_eq!(rows.len(), 17);
    assert!(rows.iter().all(|r| r["prompt"].as_str().is_some_and(|p| !p.is_empty())));
}

#[test]
fn unknown_label_in_manifest_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds");
    ok(maple(&["data", "synth", "--hierarchy", "dfc15", "--n", "8", "--out", s(&data), "--image-size", "16"]));
    let manifest = data.join("manifest.jsonl");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    first["labels"] = serde_json::json!(["no-such-class"]);
    let rest: Vec<&str> = text.lines().skip(1).collect();
    std::fs::write(&manifest, format!("{first}\n{}\n", rest.join("\n"))).unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = maple(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_train_eval_analyze_export() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("ds");
    ok(maple(&["data", "synth", "--hierarchy", "dfc15", "--n", "48", "--seed", "3", "--out", s(&data), "--image-size", "16", "--format", "f32"]));
    assert_eq!(std::fs::read_to_string(data.join("manifest.jsonl")).unwrap().lines().count(), 48);
    assert!(data.join("hierarchy.yaml").exists());

    let cfg = tiny_config(root, "");
    let run_a = root.join("a");
    let run_b = root.join("b");
    let flat = root.join("flat");
    for out in [&run_a, &run_b] {
        ok(maple(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(out)]));
    }
    ok(maple(&["train", "--config", s(&cfg), "--data", s(&data), "--mode", "flat", "--out", s(&flat)]));

    // Same seed and config: identical bytes.
    for f in ["checkpoint.bin", "checkpoint.json", "eval_report.json", "train_log.jsonl", "predictions.jsonl"] {
        let a = std::fs::read(run_a.join(f)).unwrap_or_else(|_| panic!("missing {f}"));
        assert_eq!(a, std::fs::read(run_b.join(f)).unwrap(), "{f} differs");
    }
    assert!(run_a.join("curves/pr_leaf.csv").exists());

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run_a.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 5);
    assert!(report["per_level_auprc"]["l1"].is_number() || report["per_level_auprc"]["l1"].is_null());

    // Evaluate the saved checkpoint on the full dataset.
    let eval = root.join("eval.json");
    let dump_m = root.join("maple.jsonl");
    let dump_f = root.join("flat.jsonl");
    ok(maple(&["eval", "--checkpoint", s(&run_a), "--data", s(&data), "--report", s(&eval), "--dump", s(&dump_m), "--curves", s(&root.join("curves"))]));
    ok(maple(&["eval", "--checkpoint", s(&flat.join("checkpoint.bin")), "--data", s(&data), "--report", s(&root.join("flat.json")), "--dump", s(&dump_f)]));
    let ev: serde_json::Value = serde_json::from_slice(&std::fs::read(&eval).unwrap()).unwrap();
    assert_eq!(ev["num_samples"], 48);
    assert_eq!(ev["per_level_auprc"].as_object().unwrap().len(), 3);
    let flat_ev: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("flat.json")).unwrap()).unwrap();
    assert!(flat_ev["leaf_auprc"].is_number());

    let first: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&dump_m).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["scores"].as_array().unwrap().len(), 17);
    assert_eq!(first["leaf_scores"].as_array().unwrap().len(), 8);
    assert_eq!(first["per_level_argmax"].as_array().unwrap().len(), 3);

    let conf = root.join("confusion.json");
    ok(maple(&["analyze", "confusion", "--a", s(&dump_f), "--b", s(&dump_m), "--truth", s(&data), "--out", s(&conf)]));
    let c: serde_json::Value = serde_json::from_slice(&std::fs::read(&conf).unwrap()).unwrap();
    assert_eq!(
        c["absolute_reduction"].as_i64().unwrap(),
        c["total_baseline"].as_i64().unwrap() - c["total_maple"].as_i64().unwrap()
    );

    let emb = root.join("emb.csv");
    ok(maple(&["export", "embeddings", "--checkpoint", s(&run_a), "--stage", "init", "--out", s(&emb)]));
    let text = std::fs::read_to_string(&emb).unwrap();
    assert!(text.starts_with("node,level,is_leaf,d0"));
    assert_eq!(text.lines().count(), 18);
    let out = maple(&["export", "embeddings", "--checkpoint", s(&run_a), "--stage", "fused", "--out", s(&emb)]);
    assert_eq!(code(&out), 1);
    ok(maple(&["export", "embeddings", "--checkpoint", s(&run_a), "--stage", "fused", "--data", s(&data), "--out", s(&emb)]));
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = |seed: &str, name: &str| {
        let path = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_maple"))
            .args(["data", "synth", "--hierarchy", "dfc15", "--n", "8", "--image-size", "16", "--out", s(&path)])
            .env("MAPLE_SEED", seed)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        std::fs::read(path.join("images/synth-00000.ppm")).unwrap()
    };
    assert_eq!(out("4", "a"), out("4", "b"));
    assert_ne!(out("4", "c"), out("5", "d"));
}

#[test]
fn fewshot_writes_table_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("fs");
    let text = ok(maple(&["fewshot", "--config", s(&cfg), "--out", s(&out)]));
    assert!(text.starts_with("method,K=2"));
    let table = std::fs::read_to_string(out.join("fewshot_table.csv")).unwrap();
    assert!(table.contains("Flat baseline,") && table.contains("MAPLE,"));
    assert!(out.join("runs/maple-k2-r0/predictions.jsonl").exists());
    assert!(out.join("runs/flat-k2-r0/train_log.jsonl").exists());
}

#[test]
fn params_report_matches_checkpoint_walk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("params.json");
    ok(maple(&["report", "params", "--config", s(&cfg), "--walk", "--out", s(&out)]));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["walk_matches_table"], true);
    assert_eq!(v["checkpoint_walk"]["maple_total"], v["maple_total"]);
    assert_eq!(v["published_overhead_pct"], 2.6);
}
