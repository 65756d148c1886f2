use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowtune::experiment::ExperimentConfig;

const TASK: &str = r#"{
  "name": "count",
  "vocab_size": 3,
  "max_len": 4,
  "beta": 1.0,
  "conditions": [ { "id": 0 }, { "id": 1 } ],
  "ref_model": { "kind": "seeded", "seed": 11, "spread": 1.0 },
  "reward": { "kind": "count", "alpha": 0.5, "token": 1, "cap": 2 }
}"#;

fn config(rounds: usize, seeds: &str) -> String {
    format!(
        r#"{{
  "name": "exp",
  "task": {{ "path": "task.json" }},
  "trainer": {{ "rounds": {rounds}, "batch_size": 8, "reset_period": 5, "diagnostics_every": 5, "checkpoint_every": 10 }},
  "network": {{ "embed_dim": 4, "hidden": 8, "flow_hidden": 8, "window": 3 }},
  "seeds": {seeds}
}}"#
    )
}

fn setup(rounds: usize, seeds: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("task.json"), TASK).unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, config(rounds, seeds)).unwrap();
    (dir, cfg)
}

fn flowtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowtune")).args(args).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn train_writes_one_metrics_line_per_round() {
    let (dir, cfg) = setup(12, "[1]");
    let out = dir.path().join("out");
    ok(flowtune(&["train", "--config", p(&cfg), "--seed", "1", "--out", p(&out)]));
    let run = out.join("exp/seed-1");
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 12);
    let resets: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["reset"] == true)
        .map(|v| v["round"].as_u64().unwrap())
        .collect();
    assert_eq!(resets, vec![5, 10]);
    for f in ["resolved-config.json", "diagnostics.jsonl", "final.json", "checkpoints/round-000010/manifest.json", "checkpoints/final/manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let resolved = ExperimentConfig::load(run.join("resolved-config.json")).unwrap();
    let again = serde_json::to_string_pretty(&resolved).unwrap();
    assert_eq!(ExperimentConfig::from_json_str(&again).unwrap(), resolved);
}

#[test]
fn override_changes_only_reset_cadence() {
    let (dir, cfg) = setup(3, "[0]");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(flowtune(&["train", "--config", p(&cfg), "--out", p(&a)]));
    ok(flowtune(&["train", "--config", p(&cfg), "--out", p(&b), "--override", "trainer.M=1000"]));
    let load = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(d.join("exp/seed-0/resolved-config.json")).unwrap()).unwrap()
    };
    let (mut va, vb) = (load(&a), load(&b));
    assert_eq!(vb["trainer"]["reset_period"], 1000);
    va["trainer"]["reset_period"] = 1000.into();
    va["output_dir"] = vb["output_dir"].clone();
    assert_eq!(va, vb);
}

#[test]
fn reruns_are_byte_identical() {
    let (dir, cfg) = setup(15, "[3]");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(flowtune(&["train", "--config", p(&cfg), "--out", p(&a)]));
    ok(flowtune(&["train", "--config", p(&cfg), "--out", p(&b)]));
    let (ta, mut tb) = (read_tree(&a.join("exp/seed-3")), read_tree(&b.join("exp/seed-3")));
    // only the echoed output directory differs
    let strip = |t: &mut Vec<(PathBuf, Vec<u8>)>| t.retain(|(n, _)| n != Path::new("resolved-config.json"));
    let mut ta = ta;
    strip(&mut ta);
    strip(&mut tb);
    assert!(ta.len() > 10);
    assert_eq!(ta, tb);
}

#[test]
fn existing_outputs_need_force() {
    let (dir, cfg) = setup(2, "[0]");
    let out = dir.path().join("out");
    ok(flowtune(&["train", "--config", p(&cfg), "--out", p(&out)]));
    let before = read_tree(&out);
    let again = flowtune(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(read_tree(&out), before);
    ok(flowtune(&["train", "--config", p(&cfg), "--out", p(&out), "--force"]));
}

#[test]
fn invalid_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"name\": \"x\",\n  \"task\": { \"preset\": \"count\" },\n  \"trainer\": { \"roundz\": 3 }\n}\n").unwrap();
    let out = flowtune(&["train", "--config", p(&cfg)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4") && err.contains("roundz"), "{err}");
}

#[test]
fn enumerate_two_token_task() {
    let out = ok(flowtune(&["enumerate", "--task", "two-token"]));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["log_z"].as_f64().unwrap() - 1.5f64.ln()).abs() < 1e-12);
    assert_eq!(v["terminals"].as_array().unwrap().len(), 4);
    let missing = flowtune(&["enumerate", "--task", "eight-modes", "--condition", "5"]);
    assert!(!missing.status.success());
}

#[test]
fn eval_and_diagnose_checkpoints() {
    let (dir, cfg) = setup(10, "[0]");
    let out = dir.path().join("out");
    ok(flowtune(&["train", "--config", p(&cfg), "--out", p(&out)]));
    let ckpt = out.join("exp/seed-0/checkpoints/final");
    let eval = |file: &Path| {
        ok(flowtune(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--samples", "8", "--out", p(file)]));
        fs::read(file).unwrap()
    };
    let (r1, r2) = (eval(&dir.path().join("e1.json")), eval(&dir.path().join("e2.json")));
    assert_eq!(r1, r2);
    let report: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    assert!(report["mean_tvd"].as_f64().unwrap() <= 1.0);
    let too_few = flowtune(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--samples", "1"]);
    assert!(!too_few.status.success());
    let mismatch = flowtune(&["eval", "--task", "eight-modes", "--checkpoint", p(&ckpt)]);
    assert!(!mismatch.status.success());
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("vocab size 3"));
    let diag = ok(flowtune(&["diagnose", "--config", p(&cfg), "--checkpoint", p(&ckpt)]));
    let d: serde_json::Value = serde_json::from_slice(&diag.stdout).unwrap();
    assert_eq!(d["layers"].as_array().unwrap().len(), 3);
    assert_eq!(d["probe_size"], 64);
}

#[test]
fn ablation_grid_bookkeeping() {
    let (dir, cfg) = setup(6, "[0, 1, 2]");
    let out = dir.path().join("out");
    let bad = flowtune(&["ablate", "--config", p(&cfg), "--out", p(&out), "--grid", "full,no_magic"]);
    assert!(!bad.status.success());
    assert!(!out.exists());
    ok(flowtune(&["ablate", "--config", p(&cfg), "--out", p(&out), "--override", "trainer.vargrad_k=4"]));
    let metrics: Vec<_> = read_tree(&out).into_iter().filter(|(n, _)| n.ends_with("metrics.jsonl")).collect();
    assert_eq!(metrics.len(), 12);
    for (name, bytes) in &metrics {
        let resets = String::from_utf8_lossy(bytes).lines().filter(|l| l.contains("\"reset\":true")).count();
        if name.starts_with("exp/no_reset") {
            assert_eq!(resets, 0);
        } else {
            assert_eq!(resets, 1, "{}", name.display());
        }
    }
    let csv = fs::read_to_string(out.join("exp/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(2).unwrap().starts_with("no_reset,3,"));
}
