//! End-to-end runs of the `melm` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn melm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = melm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn gen(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec![
            "gen",
            "--out",
            s(&out),
            "--bags",
            "8",
            "--negatives",
            "4",
            "--proposals",
            "12",
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }

    fn train(&self, ds: &Path, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec!["train", "--dataset", s(ds), "--out", s(&out)];
        if !extra.contains(&"--epochs") {
            args.extend(["--epochs", "2"]);
        }
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn gen_reports_what_it_wrote() {
    let run = Run::new();
    let out = run.path("ds.json");
    let v = ok(&[
        "gen",
        "--out",
        s(&out),
        "--bags",
        "8",
        "--negatives",
        "4",
        "--proposals",
        "12",
    ]);
    assert_eq!(v["positive_bags"], 8);
    assert_eq!(v["negative_bags"], 4);
    assert_eq!(v["proposals"], 12 * 12);
    assert!(out.exists());
}

#[test]
fn usage_and_validation_errors_exit_2() {
    let run = Run::new();
    assert_eq!(melm(&["gen"]).status.code(), Some(2));
    assert_eq!(
        melm(&["gen", "--out", s(&run.path("x")), "--bags", "7"]).status.code(),
        Some(2)
    );
    assert_eq!(melm(&["frobnicate"]).status.code(), Some(2));
    let ds = run.gen("ds.json", &[]);
    let out = run.path("c.json");
    let code = |extra: &[&str]| {
        let mut args = vec!["train", "--dataset", s(&ds), "--out", s(&out)];
        args.extend_from_slice(extra);
        melm(&args).status.code()
    };
    assert_eq!(code(&["--epochs", "0"]), Some(2));
    assert_eq!(code(&["--tau", "1.5"]), Some(2));
    assert_eq!(code(&["--ablation", "everything"]), Some(2));
    assert!(!out.exists());
    assert_eq!(melm(&["--help"]).status.code(), Some(0));
}

#[test]
fn pipeline_is_byte_reproducible() {
    let a = Run::new();
    let b = Run::new();
    let mut files = Vec::new();
    for run in [&a, &b] {
        let ds = run.gen("ds.json", &["--seed", "11"]);
        let ckpt = run.train(&ds, "ckpt.json", &["--seed", "11"]);
        let metrics = run.path("metrics.json");
        ok(&[
            "eval",
            "--dataset",
            s(&ds),
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&metrics),
        ]);
        files.push([ds, ckpt, metrics].map(|p| std::fs::read(p).unwrap()));
    }
    for (x, y) in files[0].iter().zip(&files[1]) {
        assert_eq!(x, y);
    }
}

#[test]
fn eval_reports_every_metric() {
    let run = Run::new();
    let ds = run.gen("ds.json", &[]);
    let ckpt = run.train(&ds, "ckpt.json", &[]);
    let csv = run.path("m.csv");
    let v = ok(&[
        "eval",
        "--dataset",
        s(&ds),
        "--checkpoint",
        s(&ckpt),
        "--coco",
        "--csv",
        s(&csv),
    ]);
    for key in [
        "classes",
        "per_class_ap",
        "map",
        "map_coco",
        "per_class_corloc",
        "mean_corloc",
        "pointing",
        "localization_accuracy",
        "localization_variance",
        "warnings",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let map = v["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("map,mean_corloc,pointing"));
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn train_writes_one_csv_row_per_epoch() {
    let run = Run::new();
    let ds = run.gen("ds.json", &[]);
    let csv = run.path("epochs.csv");
    run.train(&ds, "ckpt.json", &["--csv", s(&csv), "--epochs", "3"]);
    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,disc_loss,loc_loss_1,loc_loss_2,loc_loss_3,global_entropy,local_entropy,loc_acc,loc_var,seconds"
    );
    assert_eq!(lines.len(), 4);
}

#[test]
fn stop_and_resume_matches_one_run() {
    let run = Run::new();
    let ds = run.gen("ds.json", &[]);
    let whole = run.train(&ds, "whole.json", &["--epochs", "4"]);
    let half = run.train(&ds, "half.json", &["--epochs", "4", "--stop-after", "2"]);
    let v = ok(&[
        "train",
        "--dataset",
        s(&ds),
        "--resume",
        s(&half),
        "--out",
        s(&run.path("rest.json")),
    ]);
    assert_eq!(v["epochs_run"], 2);
    assert_eq!(
        std::fs::read(whole).unwrap(),
        std::fs::read(run.path("rest.json")).unwrap()
    );
}

#[test]
fn inspect_dumps_the_selection() {
    let run = Run::new();
    let ds = run.gen("ds.json", &[]);
    let ckpt = run.train(&ds, "ckpt.json", &[]);
    let v = ok(&[
        "inspect",
        "--dataset",
        s(&ds),
        "--checkpoint",
        s(&ckpt),
        "--bag",
        "pos-c0-0000",
    ]);
    for key in [
        "cliques",
        "selected_clique",
        "global_entropy",
        "h_star",
        "h_star_box",
        "weights",
        "hard_negatives",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let selected = v["selected_clique"].as_u64().unwrap() as usize;
    let members = &v["cliques"][selected]["members"];
    assert!(members.as_array().unwrap().contains(&v["h_star"]));

    let missing = melm(&[
        "inspect",
        "--dataset",
        s(&ds),
        "--checkpoint",
        s(&ckpt),
        "--bag",
        "nope",
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
}

#[test]
fn eval_rejects_mismatched_inputs() {
    let run = Run::new();
    let ds = run.gen("ds.json", &[]);
    let ckpt = run.train(&ds, "ckpt.json", &[]);

    let wide = run.gen("wide.json", &["--feature-dim", "30"]);
    let out = melm(&["eval", "--dataset", s(&wide), "--checkpoint", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("feature_dim"));

    let mut raw: Value = serde_json::from_slice(&std::fs::read(&ds).unwrap()).unwrap();
    for bag in raw["bags"].as_array_mut().unwrap() {
        bag.as_object_mut().unwrap().remove("ground_truth");
    }
    let bare = run.path("bare.json");
    std::fs::write(&bare, serde_json::to_vec(&raw).unwrap()).unwrap();
    let out = melm(&["eval", "--dataset", s(&bare), "--checkpoint", s(&ckpt)]);
    assert_ne!(out.status.code(), Some(0));
    // Training does not need ground truth.
    run.train(&bare, "bare_ckpt.json", &["--epochs", "1"]);
}

#[test]
fn config_file_sits_under_flags() {
    let run = Run::new();
    let cfg = run.path("cfg.json");
    std::fs::write(&cfg, r#"{"synth": {"proposals_per_bag": 9, "negatives": 2}}"#).unwrap();
    let out = run.path("ds.json");
    let v = ok(&[
        "gen",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--bags",
        "4",
        "--negatives",
        "3",
    ]);
    assert_eq!(v["negative_bags"], 3);
    assert_eq!(v["proposals"], 9 * 7);

    std::fs::write(&cfg, r#"{"synth": {"bogus": 1}}"#).unwrap();
    assert_eq!(
        melm(&["gen", "--config", s(&cfg), "--out", s(&out)]).status.code(),
        Some(2)
    );
}
