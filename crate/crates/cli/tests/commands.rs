use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[data]
num_train = 8
num_val = 4
num_test = 4

[train]
max_epochs = 1
";

fn scse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scse"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn paramcount_reports_paper_overhead() {
    let o = scse(&[
        "paramcount",
        "--preset",
        "paper",
        "--arch",
        "unet",
        "--se",
        "scse",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("33280"), "{text}");
    let pct: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("overhead_percent,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((1.3..=1.9).contains(&pct), "{pct}");

    let desk = stdout(&scse(&["paramcount"]));
    assert!(desk.contains("11120"), "{desk}");
}

#[test]
fn gradcheck_verdicts_and_usage_errors() {
    let o = scse(&["gradcheck", "--block", "scse", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("PASS"));
    let a = scse(&["gradcheck", "--block", "cse", "--eps", "1e-5"]);
    let b = scse(&["gradcheck", "--block", "cse", "--eps", "1e-5"]);
    assert_eq!(a.status.code(), b.status.code());
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(
        scse(&["gradcheck", "--block", "bogus"]).status.code(),
        Some(2)
    );
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[train]\nbatch_size = 0\n").unwrap();
    let o = scse(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_size"));

    fs::write(&path, "[train]\nbogus_key = 1\n").unwrap();
    assert_eq!(
        scse(&["train", "--config", path.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn train_writes_artifacts_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let runs: Vec<Vec<Vec<u8>>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = scse(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            ["checkpoint.setf", "log.csv", "manifest.toml"]
                .iter()
                .map(|f| fs::read(out.join(f)).unwrap())
                .collect()
        })
        .collect();
    assert_eq!(runs[0][0], runs[1][0]);
    assert_eq!(runs[0][1], runs[1][1]);
    let manifest = String::from_utf8(runs[0][2].clone()).unwrap();
    assert!(manifest.contains("config_hash"), "{manifest}");

    let ckpt = dir.path().join("a").join("checkpoint.setf");
    let o = scse(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let wrong = scse(&[
        "eval",
        "--config",
        &cfg,
        "--se",
        "scse",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(!wrong.status.success());
}

#[test]
fn passthrough_eval_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("eval");
    let o = scse(&[
        "eval",
        "--config",
        &cfg,
        "--passthrough",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("1.000±0.000"), "{}", stdout(&o));
    let per_class = fs::read_to_string(out.join("eval_test_per_class.csv")).unwrap();
    assert_eq!(per_class.lines().count(), 1 + 4 * 4);
}

#[test]
fn ablation_grid_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut grids = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = scse(&[
            "ablate",
            "--config",
            &cfg,
            "--archs",
            "unet",
            "--variants",
            "none,scse",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let files: Vec<String> = ["grid.csv", "pvalues.csv", "cells.csv"]
            .iter()
            .map(|f| fs::read_to_string(out.join(f)).unwrap())
            .collect();
        assert!(out.join("timing.csv").exists());
        assert!(out
            .join("cells")
            .join("unet_scse")
            .join("checkpoint.setf")
            .exists());
        grids.push(files);
    }
    assert_eq!(grids[0], grids[1]);
    assert!(
        grids[0][0].starts_with("architecture,No SE,+scSE\n"),
        "{}",
        grids[0][0]
    );
    assert_eq!(grids[0][1].lines().count(), 2);
}
