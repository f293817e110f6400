use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "teacher": {"hidden": [8, 8, 8], "train_steps": 40, "batch": 32},
  "head_hidden": [4],
  "group_size": 4,
  "groups_per_step": 2,
  "fake_updates_per_gen": 2,
  "grpo_warmup_steps": 1,
  "total_steps": 12,
  "eval_samples": 64
}"#;

fn advdmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advdmd")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    teacher: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("c.json");
    fs::write(&config, TINY).unwrap();
    let out = advdmd(&["train-teacher", "--config", s(&config), "--out", s(&root.join("t")), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let teacher = root.join("t/teacher.ckpt");
    Fixture { _dir: dir, root, config, teacher }
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = advdmd(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_subcommands_and_flags_exit_2() {
    for args in [&["frobnicate"][..], &["distill", "--out", "x", "--bogus"], &["distill", "--out", "x", "--variant", "gan"]] {
        let out = advdmd(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"alpha": -1}"#).unwrap();
    let out = advdmd(&["train-teacher", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));

    let typo = dir.path().join("typo.json");
    fs::write(&typo, r#"{"alpah": 0.1}"#).unwrap();
    let out = advdmd(&["train-teacher", "--config", s(&typo), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));
}

#[test]
fn manifest_is_written_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let missing = dir.path().join("no-such-teacher.ckpt");
    let out = advdmd(&["distill", "--teacher", s(&missing), "--out", s(&out_dir), "--seed", "4"]);
    assert_eq!(out.status.code(), Some(1));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config"]["alpha"], 0.1);
    assert!(manifest["finished_unix"].is_null());
    assert!(!out_dir.join("metrics.csv").exists());
}

#[test]
fn distill_is_reproducible_and_writes_its_outputs() {
    let f = fixture();
    let run = |name: &str| {
        let dir = f.root.join(name);
        let out = advdmd(&["distill", "--config", s(&f.config), "--teacher", s(&f.teacher), "--out", s(&dir), "--seed", "7"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    };
    let (a, b) = (run("a"), run("b"));
    let metrics = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&metrics).starts_with("step,role,"));
    assert_eq!(fs::read(a.join("samples.svg")).unwrap(), fs::read(b.join("samples.svg")).unwrap());
    for name in ["student.ckpt", "samples.csv", "report.json"] {
        assert!(a.join(name).exists(), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["finished_unix"].is_u64());

    // re-running from the manifest reproduces the run
    let c = f.root.join("c-run");
    let out = advdmd(&["distill", "--manifest", s(&a.join("manifest.json")), "--out", s(&c)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(metrics, fs::read(c.join("metrics.csv")).unwrap());

    let csv = f.root.join("s.csv");
    let svg = f.root.join("s.svg");
    let out = advdmd(&["sample", "--ckpt", s(&a.join("student.ckpt")), "--n", "10", "--out", s(&csv), "--svg", s(&svg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("x,y,c"));
    assert_eq!(text.lines().count(), 11);
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<?xml"));

    let report = f.root.join("r.json");
    let out = advdmd(&["eval", "--ckpt", s(&a.join("student.ckpt")), "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["variant"], "advdmd/sde");
    assert_eq!(r["n_samples"], 64);
    assert_eq!(r, serde_json::from_str::<serde_json::Value>(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap());
}

#[test]
fn variant_and_sim_flags_reach_the_run() {
    let f = fixture();
    let dir = f.root.join("g");
    let out = advdmd(&[
        "distill", "--config", s(&f.config), "--teacher", s(&f.teacher), "--out", s(&dir), "--variant", "grpo-fixed", "--sim", "ode",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["variant"], "grpo_fixed");
    assert_eq!(manifest["config"]["sim"], "ode");
}

#[test]
fn teacher_files_sample_and_evaluate() {
    let f = fixture();
    let csv = f.root.join("t.csv");
    let out = advdmd(&["sample", "--ckpt", s(&f.teacher), "--n", "5", "--steps", "3", "--out", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 6);
    let report = f.root.join("t.json");
    let out = advdmd(&["eval", "--ckpt", s(&f.teacher), "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(&report).unwrap().contains("\"teacher\""));

    let garbage = f.root.join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = advdmd(&["eval", "--ckpt", s(&garbage), "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}

#[test]
fn ablate_default_matrix_over_five_seeds_gives_twenty_rows() {
    let f = fixture();
    let out_csv = f.root.join("abl/table.csv");
    let out = advdmd(&[
        "ablate", "--matrix", "default", "--seeds", "5", "--out", s(&out_csv), "--config", s(&f.config), "--teacher", s(&f.teacher),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&out_csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,seed,steps,mmd2,w2,coverage,mean_reward,runtime_s"));
    assert_eq!(lines.count(), 20);
    let summary = fs::read_to_string(f.root.join("abl/table.summary.csv")).unwrap();
    assert_eq!(summary.lines().filter(|l| l.contains(",median,")).count(), 4);
    assert!(f.root.join("abl/table.manifest.json").exists());
}
