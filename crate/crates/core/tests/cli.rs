use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dladmm::cli::CSV_HEADER;
use dladmm::data::{write_graph, write_idx_images, write_idx_labels};
use dladmm::gcn::{sbm_graph, SbmSpec};
use dladmm::Rng;

fn dladmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dladmm")).args(args).output().unwrap()
}

fn rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

/// 60 tiny 4x4 "images" whose class is the brightest quadrant.
fn write_idx_fixture(dir: &Path) {
    let mut rng = Rng::new(1);
    let n = 60;
    let mut pixels = Vec::with_capacity(n * 16);
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let class = j % 4;
        for p in 0..16 {
            let quadrant = (p / 8) * 2 + (p % 4) / 2;
            let base = if quadrant == class { 200.0 } else { 30.0 };
            pixels.push((base + rng.uniform(-20.0, 20.0)) as u8);
        }
        labels.push(class as u8);
    }
    write_idx_images(dir.join("train-images-idx3-ubyte"), n as u32, 4, 4, &pixels).unwrap();
    write_idx_labels(dir.join("train-labels-idx1-ubyte"), &labels).unwrap();
}

#[test]
fn train_writes_header_and_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    write_idx_fixture(dir.path());
    let out = dir.path().join("run.csv");
    let o = dladmm(&[
        "train", "mlp", "--data", dir.path().to_str().unwrap(), "--layers", "16,8,8,4", "--rho", "1", "--nu", "1e-6",
        "--epochs", "12", "--seed", "42", "--subsample", "40", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = rows(&out);
    assert_eq!(lines[0], CSV_HEADER.join(","));
    assert_eq!(lines.len(), 13);
    assert!(lines[1..].iter().enumerate().all(|(k, l)| l.starts_with(&format!("{},", k + 1))));
}

#[test]
fn identical_invocations_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let o = dladmm(&["train", "mlp", "--data", "builtin:separable", "--epochs", "20", "--seed", "3", "--out", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(dladmm(&["train", "mlp", "--layers", "4,8,2"]).status.code(), Some(1));
    assert_eq!(dladmm(&["train", "mlp", "--data", "builtin:separable", "--epochs", "0"]).status.code(), Some(1));
    assert_eq!(dladmm(&["train", "mlp", "--data", "builtin:separable", "--frobnicate"]).status.code(), Some(1));
    let o = dladmm(&["train", "mlp", "--data", "/nonexistent/mnist", "--layers", "784,10,10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/mnist"));
    assert_eq!(dladmm(&["train", "gcn", "--data", "builtin:sbm", "--rho", "-1"]).status.code(), Some(1));
    assert_eq!(dladmm(&[]).status.code(), Some(1));
}

#[test]
fn divergent_baseline_exits_2_and_keeps_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gd.csv");
    let o = dladmm(&[
        "train", "mlp", "--data", "builtin:separable", "--optimizer", "gd", "--lr", "1e200", "--epochs", "50",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("aborted"));
    assert!(rows(&out).len() < 51);
}

#[test]
fn gcn_bundle_and_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let g = sbm_graph(&SbmSpec { n_nodes: 40, ..Default::default() }, &mut Rng::new(2)).unwrap();
    write_graph(dir.path(), &g).unwrap();
    for opt in ["dladmm", "gd", "adagrad", "adadelta", "adam"] {
        let out = dir.path().join(format!("{opt}.csv"));
        let o = dladmm(&[
            "train", "gcn", "--data", dir.path().to_str().unwrap(), "--hidden", "8", "--mu", "1", "--epochs", "5",
            "--optimizer", opt, "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{opt}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(rows(&out).len(), 6);
    }
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("run.csv");
    fs::write(&cfg, format!("data = builtin:separable\nepochs = 4\nout = {}\n", out.display())).unwrap();
    let o = dladmm(&["train", "mlp", "--config", cfg.to_str().unwrap(), "--epochs", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rows(&out).len(), 7);
}

#[test]
fn wall_time_is_opt_in() {
    let o = dladmm(&["train", "mlp", "--data", "builtin:separable", "--epochs", "3"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0")));
    let o = dladmm(&["train", "mlp", "--data", "builtin:separable", "--epochs", "3", "--wall-time"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().skip(1).any(|l| !l.ends_with(",0")));
}

#[test]
fn selfcheck_exit_codes() {
    let o = dladmm(&["selfcheck", "--quick"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let o = dladmm(&["selfcheck", "--quick", "--inject-fault", "gradient"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stdout).contains("failed: mlp block gradients"));
}
