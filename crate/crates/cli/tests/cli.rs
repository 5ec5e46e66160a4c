use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tdkd_core::kd::read_target_cache;

const TINY: &str = r#"{
  "synth": {"n_labelled": 12, "n_unlabelled": 20, "n_dev": 6, "n_test": 4, "n_lm_text": 60, "seed": 3},
  "teacher_schedule": {"epochs": 2, "lr": 0.1},
  "student_schedule": {"epochs": 2, "lr": 0.1},
  "finetune_schedule": {"epochs": 1, "lr": 0.05},
  "seed": 3
}"#;

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tdkd"))
            .arg("--config")
            .arg(self.path("cfg.json"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "tdkd {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn targets(path: &Path) -> Vec<tdkd_core::kd::KdTargetSet> {
    read_target_cache(std::io::BufReader::new(std::fs::File::open(path).unwrap())).unwrap()
}

#[test]
fn pipeline_runs_end_to_end() {
    let w = Work::new();
    let data = w.s("data");
    w.ok(&["gen-data", "--out", &data]);
    w.ok(&["--data", &data, "train-teacher", "--out", &w.s("teacher.ckpt")]);
    w.ok(&["--data", &data, "train-lm", "--out", &w.s("lm.json")]);
    w.ok(&["--data", &data, "make-targets", "--teacher", &w.s("teacher.ckpt"), "--out", &w.s("lab.jsonl")]);
    w.ok(&[
        "--data",
        &data,
        "make-targets",
        "--teacher",
        &w.s("teacher.ckpt"),
        "--split",
        "unlabelled",
        "--out",
        &w.s("unl.jsonl"),
        "--pseudo-out",
        &w.s("pseudo.jsonl"),
    ]);

    let lab = targets(&w.path("lab.jsonl"));
    assert_eq!(lab.len(), 12);
    for t in &lab {
        let (frames, labels) = t.alignment.extent();
        assert_eq!(t.stored_values(), 12 * (frames + labels));
        assert!(t.validate().is_ok());
    }
    assert_eq!(targets(&w.path("unl.jsonl")).len(), 20);
    let pseudo = std::fs::read_to_string(w.path("pseudo.jsonl")).unwrap();
    assert_eq!(pseudo.lines().count(), 20);

    w.ok(&["--data", &data, "--strategy", "baseline", "train-student", "--out", &w.s("base.ckpt")]);
    w.ok(&[
        "--data",
        &data,
        "--strategy",
        "st2",
        "--lambda",
        "0.1",
        "train-student",
        "--targets",
        &w.s("lab.jsonl"),
        "--targets",
        &w.s("unl.jsonl"),
        "--init",
        &w.s("base.ckpt"),
        "--out",
        &w.s("st2.ckpt"),
    ]);
    w.ok(&[
        "--data",
        &data,
        "--strategy",
        "st1",
        "--variant",
        "collapsed",
        "--lambda",
        "0.001",
        "train-student",
        "--teacher",
        &w.s("teacher.ckpt"),
        "--out",
        &w.s("collapsed.ckpt"),
    ]);
    for (model, label) in [("base.ckpt", "baseline"), ("st2.ckpt", "kd st2"), ("collapsed.ckpt", "collapsed")] {
        w.ok(&[
            "--data",
            &data,
            "eval",
            "--model",
            &w.s(model),
            "--results",
            &w.s("results.csv"),
            "--label",
            label,
            "--hyps",
            &w.s("hyps.jsonl"),
        ]);
    }
    let csv = std::fs::read_to_string(w.path("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    let out = w.ok(&["report", "--results", &w.s("results.csv"), "--baseline", "baseline"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("kd st2") && table.contains("WERR"), "{table}");
}

#[test]
fn commands_are_deterministic() {
    let w = Work::new();
    for run in ["a", "b"] {
        let data = w.s(&format!("data_{run}"));
        w.ok(&["gen-data", "--out", &data]);
        w.ok(&["--data", &data, "train-teacher", "--out", &w.s(&format!("t_{run}.ckpt"))]);
        w.ok(&[
            "--data",
            &data,
            "make-targets",
            "--teacher",
            &w.s(&format!("t_{run}.ckpt")),
            "--out",
            &w.s(&format!("targets_{run}.jsonl")),
        ]);
    }
    for name in ["t_{}.ckpt", "targets_{}.jsonl"] {
        let a = std::fs::read(w.path(&name.replace("{}", "a"))).unwrap();
        let b = std::fs::read(w.path(&name.replace("{}", "b"))).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let mut files: Vec<_> = std::fs::read_dir(w.path("data_a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    for f in files {
        let a = std::fs::read(w.path("data_a").join(&f)).unwrap();
        let b = std::fs::read(w.path("data_b").join(&f)).unwrap();
        assert_eq!(a, b, "{f:?}");
    }
}

#[test]
fn zero_fusion_weight_leaves_targets_unchanged() {
    let w = Work::new();
    let data = w.s("data");
    w.ok(&["gen-data", "--out", &data]);
    w.ok(&["--data", &data, "train-teacher", "--out", &w.s("teacher.ckpt")]);
    w.ok(&["--data", &data, "train-lm", "--out", &w.s("lm.json")]);
    let teacher = w.s("teacher.ckpt");
    let common = ["--data", &data, "make-targets", "--teacher", &teacher, "--split", "unlabelled"];
    w.ok(&[&common[..], &["--out", &w.s("plain.jsonl")]].concat());
    w.ok(&[&common[..], &["--out", &w.s("fused0.jsonl"), "--fuse-lm", "0", "--lm", &w.s("lm.json")]].concat());
    w.ok(&[&common[..], &["--out", &w.s("fused1.jsonl"), "--fuse-lm", "1", "--lm", &w.s("lm.json")]].concat());
    let plain = targets(&w.path("plain.jsonl"));
    let zero = targets(&w.path("fused0.jsonl"));
    let one = targets(&w.path("fused1.jsonl"));
    let bits = |ts: &[tdkd_core::kd::KdTargetSet]| -> Vec<u64> {
        ts.iter().flat_map(|t| t.dists.iter().flatten().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&plain), bits(&zero));
    assert_eq!(
        plain.iter().map(|t| &t.alignment).collect::<Vec<_>>(),
        zero.iter().map(|t| &t.alignment).collect::<Vec<_>>()
    );
    assert_ne!(bits(&plain), bits(&one));
}

#[test]
fn bench_reports_formula_counts() {
    let w = Work::new();
    w.ok(&["bench", "--sizes", "10,2,5;20,4,5", "--reps", "1", "--out", &w.s("bench.csv")]);
    let csv = std::fs::read_to_string(w.path("bench.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[4], f[5], "{line}");
        rows += 1;
    }
    assert_eq!(rows, 6);
    assert!(csv.contains("onebest,10,2,5,60,60"));
    assert!(csv.contains("full,20,4,5,500,500"));
}

#[test]
fn config_errors_exit_with_two() {
    let w = Work::new();
    let data = w.s("data");
    w.ok(&["gen-data", "--out", &data]);
    // st2 without an init checkpoint.
    let out = w.run(&["--data", &data, "--strategy", "st2", "train-student", "--out", &w.s("x.ckpt")]);
    assert_eq!(out.status.code(), Some(2));
    // Out-of-range schedule.
    std::fs::write(w.path("bad.json"), r#"{"teacher_schedule": {"lr_decay": 1.5}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tdkd"))
        .args(["--config", &w.s("bad.json"), "--data", &data, "train-teacher", "--out", &w.s("x.ckpt")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // Malformed JSON.
    std::fs::write(w.path("broken.json"), "{").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tdkd"))
        .args(["--config", &w.s("broken.json"), "gen-data", "--out", &w.s("d2")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_failure_exits_with_three() {
    let w = Work::new();
    let data = w.s("data");
    w.ok(&["gen-data", "--out", &data]);
    std::fs::write(
        w.path("hot.json"),
        r#"{"synth": {"n_labelled": 12, "n_unlabelled": 20, "n_dev": 6, "n_test": 4, "n_lm_text": 60, "seed": 3},
            "teacher_schedule": {"epochs": 3, "lr": 1e300, "clip": 0}}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tdkd"))
        .args(["--config", &w.s("hot.json"), "--data", &data, "train-teacher", "--out", &w.s("x.ckpt")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
