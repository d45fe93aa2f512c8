//! End-to-end runs of the `ct-sfda` binary.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::tiny_config_text;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ct-sfda"));
    c.env_remove("CT_SFDA_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Writes the tiny config into `dir` and returns `(config path, run dir)`.
fn tiny_setup(dir: &Path) -> (PathBuf, PathBuf) {
    let out = dir.join("results");
    let cfg = dir.join("run.toml");
    fs::write(&cfg, tiny_config_text(&out)).unwrap();
    (cfg, out.join("tiny"))
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--n", "4", "--length", "32", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&synth(&a, &["--seed", "4"])), 0);
    assert_eq!(code(&synth(&b, &["--seed", "4"])), 0);
    for domain in ["source", "target"] {
        for file in ["manifest.json", "series.bin", "labels.bin"] {
            let x = fs::read(a.join(domain).join(file)).unwrap();
            let y = fs::read(b.join(domain).join(file)).unwrap();
            assert_eq!(x, y, "{domain}/{file}");
        }
    }
}

#[test]
fn identity_shift_writes_identical_domains() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = synth(&out, &["--shift-amplitude", "1.0", "--shift-noise", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = fs::read(out.join("source/series.bin")).unwrap();
    let t = fs::read(out.join("target/series.bin")).unwrap();
    assert_eq!(s, t);
}

#[test]
fn synth_writes_long_single_channel_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mfd");
    let o = run(&[
        "synth",
        "--classes",
        "3",
        "--length",
        "5120",
        "--n",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let m = json(&out.join("source/manifest.json"));
    assert_eq!(
        (m["n"].as_u64(), m["d"].as_u64(), m["l"].as_u64(), m["k"].as_u64()),
        (Some(6), Some(1), Some(5120), Some(3))
    );
    assert_eq!(fs::metadata(out.join("source/series.bin")).unwrap().len(), 6 * 5120 * 4);
}

#[test]
fn adapt_without_pretrain_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = tiny_setup(dir.path());
    assert_eq!(code(&run(&["adapt", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn bad_config_and_unknown_suite_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "tta.nn = 3\n").unwrap();
    assert_eq!(code(&run(&["pretrain", "--config", bad.to_str().unwrap()])), 2);
    let (cfg, _) = tiny_setup(dir.path());
    assert_eq!(
        code(&run(&[
            "ablate",
            "--config",
            cfg.to_str().unwrap(),
            "--suite",
            "nonsense"
        ])),
        2
    );
    assert_eq!(code(&run(&["pretrain"])), 2);
}

#[test]
fn pretrain_then_adapt_never_opens_source_files() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, run_dir) = tiny_setup(dir.path());
    let cfg = cfg.to_str().unwrap();
    let o = run(&["pretrain", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["reconstructor", "backbone"] {
        assert!(run_dir.join("checkpoints").join(name).exists());
    }
    let o = run(&["adapt", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run_dir.join("checkpoints/warp").exists());
    let scales = json(&run_dir.join("scales.json"));
    assert!(scales["v_t"].as_f64().unwrap().is_finite());

    let files = json(&run_dir.join("adapt.access.json"))["files"]
        .as_array()
        .unwrap()
        .clone();
    assert!(!files.is_empty());
    let source = run_dir.join("data/source");
    for f in &files {
        let p = PathBuf::from(f.as_str().unwrap());
        assert!(!p.starts_with(&source), "adapt opened {}", p.display());
    }
    assert!(files.iter().any(|f| f.as_str().unwrap().contains("target")));

    let log = json(&run_dir.join("run.json"));
    assert!(log["stages"]["pretrain"].as_array().unwrap().len() >= 4);
    assert!(log["stages"]["adapt"].as_array().unwrap().len() >= 2);
}

#[test]
fn pretrain_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, run_dir) = tiny_setup(dir.path());
    let cfg = cfg.to_str().unwrap();
    let read_ckpt = || {
        let mut bytes = Vec::new();
        for name in ["reconstructor", "backbone"] {
            let d = run_dir.join("checkpoints").join(name);
            let mut entries: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
            entries.sort();
            for p in entries {
                bytes.extend(fs::read(p).unwrap());
            }
        }
        bytes
    };
    assert_eq!(code(&run(&["pretrain", "--config", cfg])), 0);
    let first = read_ckpt();
    assert_eq!(code(&run(&["pretrain", "--config", cfg])), 0);
    assert_eq!(first, read_ckpt());
}

#[test]
fn seed_override_reaches_the_run_log() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, run_dir) = tiny_setup(dir.path());
    let o = bin()
        .args(["pretrain", "--config", cfg.to_str().unwrap()])
        .env("CT_SFDA_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(json(&run_dir.join("run.json"))["seed"].as_u64(), Some(11));

    let o = bin()
        .args(["pretrain", "--config", cfg.to_str().unwrap()])
        .env("CT_SFDA_SEED", "eleven")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_writes_scenario_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, run_dir) = tiny_setup(dir.path());
    let o = run(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let scenario = json(&run_dir.join("scenario.json"));
    let first = scenario.as_array().map(|a| a[0].clone()).unwrap_or(scenario);
    for key in ["mf1_no_adapt", "mf1_source_replay", "mf1_full", "mf1_full_with_ia"] {
        let v = first[key].as_f64().unwrap_or_else(|| panic!("{key} missing"));
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    let table = fs::read_to_string(run_dir.join("table.csv")).unwrap();
    assert!(table.starts_with("Algorithm,"));
    assert_eq!(table.lines().count(), 5);
    assert!(run_dir.join("nn_distance.csv").exists());
}

#[test]
fn branch_ablation_has_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, run_dir) = tiny_setup(dir.path());
    let o = run(&["ablate", "--config", cfg.to_str().unwrap(), "--suite", "branch"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = json(&run_dir.join("ablation-branch.json"));
    let rows = table["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["w/o SR", "w/o OC", "full"]);
    let csv = fs::read_to_string(run_dir.join("ablation-branch.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
