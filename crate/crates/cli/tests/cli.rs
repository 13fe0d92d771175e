use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ebr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebr")).args(args).output().expect("run ebr")
}

fn ok(args: &[&str]) -> String {
    let out = ebr(args);
    assert!(
        out.status.success(),
        "ebr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small world so each test runs in well under a second.
fn small_world(dir: &Path) -> PathBuf {
    let cfg = dir.join("world.json");
    fs::write(
        &cfg,
        r#"{"seed": 3, "num_product_types": 6, "products_per_type": 40, "num_queries": 100}"#,
    )
    .unwrap();
    let data = dir.join("data");
    ok(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    data
}

#[test]
fn gen_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_world(dir.path());
    let b = dir.path().join("again");
    ok(&["gen", "--config", s(&dir.path().join("world.json")), "--out", s(&b)]);
    for name in [
        "queries.jsonl",
        "products.jsonl",
        "engagement.jsonl",
        "judgments.jsonl",
        "pt_predictions.jsonl",
        "ground_truth.jsonl",
        "queries_corrupted.jsonl",
    ] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["outputs"]["products.jsonl"].as_str().unwrap().len(), 64);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = ebr(&["gen", "--config", s(&missing), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = ebr(&["train", "--data", "d", "--out", "o", "--labels", "l.jsonl", "--label-revision", "off"]);
    assert_eq!(out.status.code(), Some(2));

    let out = ebr(&["experiment", "--preset", "bogus", "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));

    let out = ebr(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_preset_lists_the_presets() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_world(dir.path());
    let out = ebr(&["experiment", "--preset", "bogus", "--data", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for p in ["omega_sweep", "ablation_lr", "ablation_ti", "ablation_ls_ns", "ablation_mol", "full_stack"] {
        assert!(err.contains(p), "{err}");
    }
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = ebr(&["eval", "--data", s(dir.path()), "--checkpoint", "none.json", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_documents_every_command() {
    for cmd in ["gen", "rrm-train", "annotate", "train", "mine", "eval", "augment", "experiment", "report"] {
        let out = ok(&[cmd, "--help"]);
        assert!(out.contains("--seed") && out.contains("--config") && out.contains("--threads"), "{cmd}");
    }
    let train = ok(&["train", "--help"]);
    for flag in ["--omega", "--typos", "--label-revision", "--new-labels", "--mining"] {
        assert!(train.contains(flag), "{flag}");
    }
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = small_world(d);
    ok(&["rrm-train", "--data", s(&data), "--out", s(&d.join("rrm"))]);
    let rrm = d.join("rrm/rrm_params.json");
    assert!(d.join("rrm/rrm_scores.jsonl").is_file());
    ok(&["annotate", "--data", s(&data), "--out", s(&d.join("lab")), "--rrm", s(&rrm)]);
    let labels = d.join("lab/labeled_training.jsonl");
    ok(&[
        "train", "--data", s(&data), "--out", s(&d.join("run")), "--labels", s(&labels), "--rrm", s(&rrm), "--seed", "4",
    ]);
    let run = d.join("run");
    for f in ["encoder.ckpt.json", "loss_curve.tsv", "train_config.json", "run_summary.json", "run_manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let curve = fs::read_to_string(run.join("loss_curve.tsv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "epoch\tmean_loss\tmean_loss_eng\tmean_loss_rel");
    assert_eq!(curve.lines().count(), 6);

    let ckpt = run.join("encoder.ckpt.json");
    ok(&["mine", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&d.join("mined")), "--rrm", s(&rrm)]);
    assert!(d.join("mined/mined_iteration_1.jsonl").is_file());

    let report = ok(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&d.join("ev")),
        "--k",
        "20,40",
        "--queries",
        s(&data.join("queries_corrupted.jsonl")),
    ]);
    for kind in ["small_index_em_recall", "big_index_em_precision", "purchased_order_recall"] {
        for k in ["20", "40"] {
            assert!(
                report.lines().any(|l| l.starts_with(&format!("clean\t{kind}\t")) && l.split('\t').nth(3) == Some(k)),
                "{kind}@{k}"
            );
        }
    }
    let merged = ok(&["report", s(&d.join("ev")), s(&d.join("ev/eval_report.tsv"))]);
    assert!(merged.starts_with("query_set\tmetric\tk\tev\teval_report\n"));
}

#[test]
fn omega_one_reports_tau_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_world(dir.path());
    let out = dir.path().join("run");
    let stdout = ok(&["train", "--data", s(&data), "--out", s(&out), "--oracle", "--omega", "1.0"]);
    assert!(stdout.contains("tau frozen"), "{stdout}");
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frozen"], serde_json::json!(["tau"]));
    // Stored as log tau, so exact up to one rounding.
    assert!((summary["tau"].as_f64().unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn same_seed_same_checkpoint_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_world(dir.path());
    let mut bytes = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "4")] {
        let out = dir.path().join(run);
        ok(&[
            "train", "--data", s(&data), "--out", s(&out), "--seed", "7", "--typos", "on", "--label-revision", "on",
            "--new-labels", "on", "--mining", "on", "--threads", threads,
        ]);
        bytes.push(fs::read(out.join("encoder.ckpt.json")).unwrap());
        assert!(out.join("mined_iteration_1.jsonl").is_file());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn augment_passthrough_writes_diff() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_world(dir.path());
    let out = dir.path().join("aug/queries.jsonl");
    let diff = dir.path().join("aug/diff.tsv");
    ok(&[
        "augment", "--input", s(&data.join("queries.jsonl")), "--out", s(&out), "--diff", s(&diff), "--probability", "1",
    ]);
    let original = fs::read_to_string(data.join("queries.jsonl")).unwrap();
    let altered = fs::read_to_string(&out).unwrap();
    assert_eq!(original.lines().count(), altered.lines().count());
    let diff = fs::read_to_string(&diff).unwrap();
    let changed = original.lines().zip(altered.lines()).filter(|(a, b)| a != b).count();
    assert_eq!(diff.lines().count() - 1, changed);
    assert!(changed > 90);
}

#[test]
fn omega_sweep_writes_table_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_world(dir.path());
    let out = dir.path().join("exp");
    let stdout = ok(&["experiment", "--preset", "omega_sweep", "--data", s(&data), "--out", s(&out), "--svg"]);
    assert_eq!(stdout.lines().count(), 8);
    let table = fs::read_to_string(out.join("comparison.tsv")).unwrap();
    assert_eq!(
        table.lines().filter(|l| l.contains("\tclean\tsmall_index_em_recall\t20\t")).count(),
        7
    );
    assert!(fs::read_to_string(out.join("omega_sweep.svg")).unwrap().starts_with("<svg"));

    let out = dir.path().join("lr");
    ok(&["experiment", "--preset", "ablation_lr", "--data", s(&data), "--out", s(&out)]);
    let table = fs::read_to_string(out.join("comparison.tsv")).unwrap();
    assert!(table.lines().any(|l| l.split('\t').nth(1) == Some("delta")));
}
