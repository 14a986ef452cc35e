use nts::datasets::load_tsv;
use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn nts(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nts"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn nts")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = nts(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn gen_data_round_trips_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "parity", "--k", "5", "--seed", "1", "--out", "a"]);
    ok(d, &["gen-data", "parity", "--k", "5", "--seed", "1", "--out", "b"]);
    for f in ["train.tsv", "valid.tsv", "test.tsv", "manifest.json"] {
        assert!(d.join("a").join(f).exists());
        assert_eq!(read(d.join("a").join(f)), read(d.join("b").join(f)), "{f}");
    }
    let ds = load_tsv(&d.join("a")).unwrap();
    assert_eq!(ds.all_true.len(), 25);

    let rules = ok(d, &["gen-data", "rules", "--n-atoms", "5", "--n-rules", "6", "--out", "r"]);
    assert_eq!(rules["counts"]["rules"], 6);
    assert!(d.join("r/rules.tsv").exists());
    ok(d, &["gen-data", "toy-kg", "--out", "kg"]);
}

#[test]
fn gen_data_rejects_bad_modulus() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nts(tmp.path(), &["gen-data", "parity", "--k", "1", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
    assert!(!tmp.path().join("x").exists());
}

const ORACLE: &str = r#"
[data]
source = "parity"
k = 4

[op]
kind = "oracle_hadamard"
dim = 4

[train]
max_epochs = 4
lambda_assoc = 0.0
lambda_dist = 0.0
"#;

#[test]
fn train_writes_a_reproducible_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "oracle.toml", ORACLE);
    let metrics = ok(d, &["train", "--config", "oracle.toml", "--out", "run1"]);
    ok(d, &["train", "--config", "oracle.toml", "--out", "run2"]);
    for f in ["config.toml", "manifest.json", "epochs.jsonl", "metrics.json", "checkpoint.bin", "residuals.csv"] {
        assert!(d.join("run1").join(f).exists(), "{f}");
    }
    for f in ["manifest.json", "epochs.jsonl", "metrics.json", "checkpoint.bin", "residuals.csv"] {
        assert_eq!(read(d.join("run1").join(f)), read(d.join("run2").join(f)), "{f}");
    }
    assert!(metrics["assoc_residual_mean"].as_f64().unwrap() < 1e-12);

    let log = String::from_utf8(read(d.join("run1/epochs.jsonl"))).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    for line in lines {
        let rec: Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "task_loss", "assoc_residual", "dist_residual", "valid_loss"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
    }

    // a different seed changes the log
    ok(d, &["train", "--config", "oracle.toml", "--seed", "9", "--out", "run3"]);
    assert_ne!(read(d.join("run1/epochs.jsonl")), read(d.join("run3/epochs.jsonl")));
}

#[test]
fn train_with_missing_dataset_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "c.toml", "[data]\nsource = \"tsv\"\ndir = \"nowhere\"\n[op]\nkind = \"tensor_fusion\"\ndim = 2\n");
    let out = nts(d, &["train", "--config", "c.toml", "--out", "run"]);
    assert!(!out.status.success());
    assert!(!d.join("run").exists());

    write(d, "typo.toml", &ORACLE.replace("max_epochs", "max_epoch"));
    assert!(!nts(d, &["train", "--config", "typo.toml", "--out", "run"]).status.success());
    assert!(!d.join("run").exists());
}

#[test]
fn eval_reports_memorisation_and_rejects_foreign_vocabularies() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "parity", "--k", "5", "--out", "p5"]);
    write(
        d,
        "mem.toml",
        "[data]\nsource = \"tsv\"\ndir = \"p5\"\n[op]\nkind = \"baseline_trilinear_diag\"\ndim = 16\n[train]\nlr = 0.01\npatience = 200\n",
    );
    ok(d, &["train", "--config", "mem.toml", "--out", "mem"]);
    let args = ["eval", "--checkpoint", "mem/checkpoint.bin", "--dataset", "p5", "--split", "train"];
    let first = nts(d, &args);
    let second = nts(d, &args);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
    let m: Value = serde_json::from_slice(&first.stdout).unwrap();
    assert!(m["hits"]["1"].as_f64().unwrap() >= 0.9, "{m}");

    ok(d, &["gen-data", "parity", "--k", "6", "--out", "p6"]);
    let bad = nts(d, &["eval", "--checkpoint", "mem/checkpoint.bin", "--dataset", "p6"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("vocabulary"));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_bug() {
    let tmp = tempfile::tempdir().unwrap();
    let report = ok(tmp.path(), &["gradcheck", "--configs", "4"]);
    assert_eq!(report["pass"], true);
    for target in ["op/tensor_fusion_tanh", "op/attention_aggregation", "loss/nll", "loss/composite"] {
        assert!(report["targets"][target]["max_rel_error"].as_f64().unwrap() < 1e-4, "{target}");
    }
    let bad = nts(tmp.path(), &["gradcheck", "--configs", "4", "--inject-bug"]);
    assert!(!bad.status.success());
    let report: Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(report["pass"], false);
}

#[test]
fn axiom_check_on_config_checkpoint_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "oracle.toml", ORACLE);
    let r = ok(d, &["axiom-check", "--config", "oracle.toml"]);
    for key in ["operator", "num_samples", "seed", "assoc_residual_mean", "dist_residual_mean", "dist_residual_per_slot"] {
        assert!(r.get(key).is_some(), "{key}");
    }
    assert!(r["assoc_residual_mean"].as_f64().unwrap() < 1e-12);
    assert!(r["dist_residual_mean"].as_f64().unwrap() < 1e-12);
    assert_eq!(r["dist_residual_per_slot"].as_array().unwrap().len(), 3);

    ok(d, &["train", "--config", "oracle.toml", "--out", "run"]);
    let from_ckpt = ok(d, &["axiom-check", "--checkpoint", "run/checkpoint.bin"]);
    assert!(from_ckpt["assoc_residual_mean"].as_f64().unwrap() < 1e-12);

    let fusion = ORACLE.replace("oracle_hadamard", "tensor_fusion").replace("dim = 4", "dim = 2");
    write(d, "fusion.toml", &fusion);
    let sweep = ok(d, &["axiom-check", "--config", "fusion.toml", "--sweep", "--seeds", "2", "--out", "sweep"]);
    assert_eq!(sweep["runs"].as_array().unwrap().len(), 8);
    assert_eq!(sweep["verdict"]["table"].as_array().unwrap().len(), 4);
    assert!(sweep["verdict"]["pass"].is_boolean());
    let csv = String::from_utf8(read(d.join("sweep/residual_vs_lambda.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 9);

    assert!(!nts(d, &["axiom-check"]).status.success());
}
