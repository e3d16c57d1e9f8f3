use std::ffi::CString;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dladmm::data::write_graph;
use dladmm::gcn::{sbm_graph, SbmSpec};
use dladmm::Rng;
use dladmm_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { dladmm_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
    buf.truncate(n.min(511));
    String::from_utf8(buf).unwrap()
}

fn separable() -> (Vec<f64>, Vec<f64>, usize) {
    let d = dladmm::synthetic::separable_task(1);
    (d.x.as_slice().to_vec(), d.y.as_slice().to_vec(), d.n_samples())
}

#[test]
fn mlp_round_trip_matches_library() {
    let (x, y, n) = separable();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { dladmm_dataset_new(x.as_ptr(), 4, y.as_ptr(), 2, n, &mut ds) }, DladmmStatus::Ok);
    let dims = [4usize, 8, 2];
    let mut cfg = dladmm_mlp_config_default();
    cfg.layer_dims = dims.as_ptr();
    cfg.n_layer_dims = 3;
    cfg.epochs = 25;
    cfg.seed = 5;
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dladmm_mlp_train(&cfg, ds, &mut model) }, DladmmStatus::Ok);
    assert_eq!(unsafe { dladmm_model_epochs(model) }, 25);

    let arch = dladmm::mlp::MlpArchitecture::new(dims.to_vec());
    let data = dladmm::synthetic::separable_task(1);
    let acfg = dladmm::admm::AdmmConfig { epochs: 25, seed: 5, ..Default::default() };
    let run = dladmm::admm::train(&arch, &data, None, &acfg, &mut |_| {}).unwrap();
    let mut row = DladmmTraceRow { iter: 0, objective: 0.0, lagrangian: 0.0, residual: 0.0, train_acc: 0.0, test_acc: 0.0, descent_ok: false, ck: 0.0 };
    for (i, t) in run.traces.iter().enumerate() {
        assert_eq!(unsafe { dladmm_model_trace_row(model, i, &mut row) }, DladmmStatus::Ok);
        assert_eq!(row.lagrangian.to_bits(), t.lagrangian.to_bits());
        assert!(row.test_acc.is_nan());
    }
    let mut out = vec![0.0; 2 * n];
    assert_eq!(unsafe { dladmm_model_predict(model, x.as_ptr(), 4, n, out.as_mut_ptr(), out.len()) }, DladmmStatus::Ok);
    let expect = run.state.predict(arch.activation, &data.x);
    assert_eq!(out, expect.as_slice());
    assert_eq!(unsafe { dladmm_model_predict(model, x.as_ptr(), 3, n, out.as_mut_ptr(), out.len()) }, DladmmStatus::InvalidArgument);
    unsafe {
        dladmm_model_free(model);
        dladmm_dataset_free(ds);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let (x, y, n) = separable();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { dladmm_dataset_new(x.as_ptr(), 4, y.as_ptr(), 2, n - 1, ptr::null_mut()) }, DladmmStatus::NullPointer);
    assert!(last_error().contains("out"));
    assert_eq!(unsafe { dladmm_dataset_new(x.as_ptr(), 4, y.as_ptr(), 2, n, &mut ds) }, DladmmStatus::Ok);
    let dims = [5usize, 8, 2];
    let mut cfg = dladmm_mlp_config_default();
    cfg.layer_dims = dims.as_ptr();
    cfg.n_layer_dims = 3;
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dladmm_mlp_train(&cfg, ds, &mut model) }, DladmmStatus::Shape);
    assert!(model.is_null());
    let dims = [4usize, 8, 2];
    cfg.layer_dims = dims.as_ptr();
    cfg.rho = -1.0;
    assert_eq!(unsafe { dladmm_mlp_train(&cfg, ds, &mut model) }, DladmmStatus::InvalidArgument);
    assert!(last_error().contains("rho"));
    unsafe { dladmm_dataset_free(ds) };

    let missing = CString::new("/nonexistent/graph").unwrap();
    let gcfg = dladmm_gcn_config_default();
    assert_eq!(unsafe { dladmm_gcn_train_dir(missing.as_ptr(), &gcfg, &mut model) }, DladmmStatus::Io);
    unsafe {
        dladmm_model_free(ptr::null_mut());
        dladmm_dataset_free(ptr::null_mut());
    }
}

#[test]
fn gcn_from_bundle_directory() {
    let g = sbm_graph(&SbmSpec { n_nodes: 40, ..Default::default() }, &mut Rng::new(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_graph(dir.path(), &g).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let hidden = [8usize];
    let mut cfg = dladmm_gcn_config_default();
    cfg.hidden_dims = hidden.as_ptr();
    cfg.n_hidden = 1;
    cfg.epochs = 10;
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dladmm_gcn_train_dir(path.as_ptr(), &cfg, &mut model) }, DladmmStatus::Ok);
    assert_eq!(unsafe { dladmm_model_epochs(model) }, 10);
    let f = g.features.cols();
    let mut out = vec![0.0; 40 * 2];
    let st = unsafe { dladmm_model_predict(model, g.features.as_slice().as_ptr(), f, 40, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, DladmmStatus::Ok);
    assert!(out.iter().all(|v| v.is_finite()));
    unsafe { dladmm_model_free(model) };
}

#[test]
fn quick_selfcheck_has_no_failures() {
    assert_eq!(dladmm_selfcheck(true), 0);
}

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libdladmm_ffi.a");
    if !lib.exists() {
        eprintln!("static library not built at {}; skipping", lib.display());
        return;
    }
    let out = tempfile::tempdir().unwrap();
    let exe = out.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler on PATH");
    assert!(status.success());
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
