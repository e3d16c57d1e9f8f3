//! C ABI for the dladmm toolkit.
//!
//! Every function returns a `DladmmStatus` (or a value that cannot fail) and
//! never unwinds across the boundary. After a non-OK status,
//! `dladmm_last_error_message` describes the failure on the calling thread.
//! Handles are opaque and must be released with their `_free` function.
//! Matrices cross the boundary as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use dladmm::admm::{train, AdmmConfig, IterationTrace};
use dladmm::checks::run_selfcheck;
use dladmm::gcn::{self, gcn_train, GcnConfig, GcnState, GcnTrace, Graph};
use dladmm::mlp::{Activation, Dataset, MlpArchitecture, MlpState};
use dladmm::risk::{Reduction, RiskKind};
use dladmm::{Error, Matrix};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DladmmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Data = 4,
    Format = 5,
    Io = 6,
    /// Training stopped early; the model handle is still produced.
    Divergence = 7,
    Nonconvergence = 8,
    Index = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DladmmRisk {
    CrossEntropy = 0,
    Squared = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DladmmReduction {
    Sum = 0,
    Mean = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DladmmStatus {
    match e {
        Error::Shape { .. } => DladmmStatus::Shape,
        Error::Index { .. } => DladmmStatus::Index,
        Error::Nonconvergence { .. } => DladmmStatus::Nonconvergence,
        Error::Divergence { .. } => DladmmStatus::Divergence,
        Error::Format { .. } => DladmmStatus::Format,
        Error::Data(_) => DladmmStatus::Data,
        Error::Argument(_) => DladmmStatus::InvalidArgument,
        Error::Io { .. } => DladmmStatus::Io,
    }
}

fn fail(e: Error) -> DladmmStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> DladmmStatus {
    set_error(format!("{what} is null"));
    DladmmStatus::NullPointer
}

fn guard(f: impl FnOnce() -> DladmmStatus) -> DladmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            DladmmStatus::Internal
        }
    }
}

/// # Safety
/// `data` must point to `rows * cols` readable doubles (or be null when the
/// product is zero).
unsafe fn read_matrix(data: *const f64, rows: usize, cols: usize) -> Result<Matrix, DladmmStatus> {
    let n = rows.checked_mul(cols).ok_or_else(|| fail(Error::Argument("matrix size overflows".into())))?;
    if n == 0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    if data.is_null() {
        return Err(null("matrix buffer"));
    }
    Matrix::from_vec(rows, cols, slice::from_raw_parts(data, n).to_vec()).map_err(fail)
}

/// Copies the last error message for this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator, or 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dladmm_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn dladmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque training set: features `n_features x n_samples` and one-hot (or
/// real-valued, for squared loss) targets `n_outputs x n_samples`.
pub struct DladmmDataset {
    inner: Dataset,
}

/// # Safety
/// `x` and `y` must point to the stated number of doubles; `out` must be a
/// valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn dladmm_dataset_new(
    x: *const f64,
    n_features: usize,
    y: *const f64,
    n_outputs: usize,
    n_samples: usize,
    out: *mut *mut DladmmDataset,
) -> DladmmStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let x = match read_matrix(x, n_features, n_samples) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let y = match read_matrix(y, n_outputs, n_samples) {
            Ok(m) => m,
            Err(s) => return s,
        };
        match Dataset::new(x, y) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(DladmmDataset { inner: d }));
                DladmmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `dataset` must be null or a handle from `dladmm_dataset_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dladmm_dataset_free(dataset: *mut DladmmDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Training settings for the MLP. `layer_dims` lists the sizes including the
/// input and output layers.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DladmmMlpConfig {
    pub layer_dims: *const usize,
    pub n_layer_dims: usize,
    pub rho: f64,
    pub nu: f64,
    pub epochs: usize,
    pub seed: u64,
    pub risk: DladmmRisk,
    pub reduction: DladmmReduction,
    /// 0 for ReLU, otherwise the negative slope of a leaky ReLU.
    pub leaky_slope: f64,
}

/// Defaults: rho = nu = 1, 200 epochs, seed 0, summed cross-entropy, ReLU.
/// The layer list is left empty.
#[no_mangle]
pub extern "C" fn dladmm_mlp_config_default() -> DladmmMlpConfig {
    DladmmMlpConfig {
        layer_dims: ptr::null(),
        n_layer_dims: 0,
        rho: 1.0,
        nu: 1.0,
        epochs: 200,
        seed: 0,
        risk: DladmmRisk::CrossEntropy,
        reduction: DladmmReduction::Sum,
        leaky_slope: 0.0,
    }
}

/// Settings for the GCN.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DladmmGcnConfig {
    pub hidden_dims: *const usize,
    pub n_hidden: usize,
    pub rho: f64,
    pub mu: f64,
    pub epochs: usize,
    pub seed: u64,
    pub reduction: DladmmReduction,
}

/// Defaults: one hidden layer of 32 (when `hidden_dims` is null), rho = mu
/// = 1, 200 epochs, seed 0, summed masked cross-entropy.
#[no_mangle]
pub extern "C" fn dladmm_gcn_config_default() -> DladmmGcnConfig {
    DladmmGcnConfig {
        hidden_dims: ptr::null(),
        n_hidden: 0,
        rho: 1.0,
        mu: 1.0,
        epochs: 200,
        seed: 0,
        reduction: DladmmReduction::Sum,
    }
}

/// One row of the training trace. Missing values are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DladmmTraceRow {
    pub iter: usize,
    pub objective: f64,
    pub lagrangian: f64,
    pub residual: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub descent_ok: bool,
    pub ck: f64,
}

impl From<&IterationTrace> for DladmmTraceRow {
    fn from(t: &IterationTrace) -> Self {
        DladmmTraceRow {
            iter: t.iter,
            objective: t.objective,
            lagrangian: t.lagrangian,
            residual: t.residual_l2,
            train_acc: t.train_acc,
            test_acc: t.test_acc.unwrap_or(f64::NAN),
            descent_ok: t.descent.satisfied,
            ck: t.ck,
        }
    }
}

impl From<&GcnTrace> for DladmmTraceRow {
    fn from(t: &GcnTrace) -> Self {
        DladmmTraceRow {
            iter: t.iter,
            objective: t.objective,
            lagrangian: t.lagrangian,
            residual: t.residual_fro,
            train_acc: t.train_acc,
            test_acc: t.test_acc,
            descent_ok: t.descent.satisfied,
            ck: t.ck,
        }
    }
}

enum Trained {
    Mlp { state: MlpState, activation: Activation },
    Gcn { state: GcnState, activation: Activation },
}

/// Opaque trained model with its per-epoch trace.
pub struct DladmmModel {
    trained: Trained,
    trace: Vec<DladmmTraceRow>,
}

fn reduction(r: DladmmReduction) -> Reduction {
    match r {
        DladmmReduction::Sum => Reduction::Sum,
        DladmmReduction::Mean => Reduction::Mean,
    }
}

/// Trains an MLP by dlADMM. On `DLADMM_STATUS_DIVERGENCE` the model up to
/// the failing epoch is still written to `out`.
///
/// # Safety
/// `config` and `dataset` must be valid; `config.layer_dims` must point to
/// `n_layer_dims` values; `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn dladmm_mlp_train(
    config: *const DladmmMlpConfig,
    dataset: *const DladmmDataset,
    out: *mut *mut DladmmModel,
) -> DladmmStatus {
    guard(|| {
        if config.is_null() {
            return null("config");
        }
        if dataset.is_null() {
            return null("dataset");
        }
        if out.is_null() {
            return null("out");
        }
        let c = &*config;
        if c.layer_dims.is_null() && c.n_layer_dims > 0 {
            return null("layer_dims");
        }
        let dims = if c.n_layer_dims == 0 {
            Vec::new()
        } else {
            slice::from_raw_parts(c.layer_dims, c.n_layer_dims).to_vec()
        };
        let mut arch = MlpArchitecture::new(dims);
        arch.risk = match c.risk {
            DladmmRisk::CrossEntropy => RiskKind::CrossEntropy,
            DladmmRisk::Squared => RiskKind::Squared,
        };
        arch.reduction = reduction(c.reduction);
        if c.leaky_slope != 0.0 {
            arch.activation = Activation::LeakyRelu(c.leaky_slope);
        }
        let cfg = AdmmConfig { rho: c.rho, nu: c.nu, epochs: c.epochs, seed: c.seed, ..Default::default() };
        let run = match train(&arch, &(*dataset).inner, None, &cfg, &mut |_| {}) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let model = DladmmModel {
            trace: run.traces.iter().map(DladmmTraceRow::from).collect(),
            trained: Trained::Mlp { state: run.state, activation: arch.activation },
        };
        *out = Box::into_raw(Box::new(model));
        match run.aborted {
            Some(e) => fail(e),
            None => DladmmStatus::Ok,
        }
    })
}

/// Loads a graph bundle directory and trains a GCN on it.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `config` valid (its `hidden_dims`
/// pointing to `n_hidden` values, or null for the default); `out` a valid
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn dladmm_gcn_train_dir(
    dir: *const c_char,
    config: *const DladmmGcnConfig,
    out: *mut *mut DladmmModel,
) -> DladmmStatus {
    guard(|| {
        if dir.is_null() {
            return null("dir");
        }
        if config.is_null() {
            return null("config");
        }
        if out.is_null() {
            return null("out");
        }
        let Ok(path) = CStr::from_ptr(dir).to_str() else {
            return fail(Error::Argument("path is not UTF-8".into()));
        };
        let graph = match dladmm::data::load_graph(path) {
            Ok(g) => g,
            Err(e) => return fail(e),
        };
        train_graph(&graph, &*config, out)
    })
}

unsafe fn train_graph(graph: &Graph, c: &DladmmGcnConfig, out: *mut *mut DladmmModel) -> DladmmStatus {
    let mut cfg = GcnConfig {
        rho: c.rho,
        mu: c.mu,
        epochs: c.epochs,
        seed: c.seed,
        reduction: reduction(c.reduction),
        ..Default::default()
    };
    if !c.hidden_dims.is_null() {
        cfg.hidden_dims = slice::from_raw_parts(c.hidden_dims, c.n_hidden).to_vec();
    }
    let run = match gcn_train(graph, &cfg, &mut |_| {}) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let model = DladmmModel {
        trace: run.traces.iter().map(DladmmTraceRow::from).collect(),
        trained: Trained::Gcn { state: run.state, activation: cfg.activation },
    };
    *out = Box::into_raw(Box::new(model));
    match run.aborted {
        Some(e) => fail(e),
        None => DladmmStatus::Ok,
    }
}

/// Number of completed epochs in the model's trace.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dladmm_model_epochs(model: *const DladmmModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).trace.len()
    }
}

/// # Safety
/// `model` must be a live handle and `row` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dladmm_model_trace_row(
    model: *const DladmmModel,
    index: usize,
    row: *mut DladmmTraceRow,
) -> DladmmStatus {
    guard(|| {
        if model.is_null() {
            return null("model");
        }
        if row.is_null() {
            return null("row");
        }
        let trace = &(*model).trace;
        match trace.get(index) {
            Some(r) => {
                *row = *r;
                DladmmStatus::Ok
            }
            None => fail(Error::Index { what: "trace row", index, limit: trace.len() }),
        }
    })
}

/// Output scores of the trained network. For an MLP, `x` holds `n_features
/// x n_samples` inputs and `out` receives `n_outputs x n_samples`. For a GCN,
/// `x` holds the `n_nodes x n_features` node features of the training graph
/// (`n_samples` is the node count) and `out` receives `n_nodes x n_classes`.
/// `out_len` is the capacity of `out` in doubles.
///
/// # Safety
/// Buffers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn dladmm_model_predict(
    model: *const DladmmModel,
    x: *const f64,
    n_features: usize,
    n_samples: usize,
    out: *mut f64,
    out_len: usize,
) -> DladmmStatus {
    guard(|| {
        if model.is_null() {
            return null("model");
        }
        if out.is_null() {
            return null("out");
        }
        let scores = match &(*model).trained {
            Trained::Mlp { state, activation } => {
                if n_features != state.w[0].cols() {
                    return fail(Error::Argument(format!(
                        "expected {} input features, got {n_features}",
                        state.w[0].cols()
                    )));
                }
                let x = match read_matrix(x, n_features, n_samples) {
                    Ok(m) => m,
                    Err(s) => return s,
                };
                state.predict(*activation, &x)
            }
            Trained::Gcn { state, activation } => {
                if n_samples != state.a_norm.rows() || n_features != state.w[0].rows() {
                    return fail(Error::Argument(format!(
                        "expected {} x {} node features, got {n_samples} x {n_features}",
                        state.a_norm.rows(),
                        state.w[0].rows()
                    )));
                }
                let x = match read_matrix(x, n_samples, n_features) {
                    Ok(m) => m,
                    Err(s) => return s,
                };
                gcn::predict(&state.w, &state.a_norm, *activation, &x)
            }
        };
        let vals = scores.as_slice();
        if out_len < vals.len() {
            return fail(Error::Argument(format!("output buffer holds {out_len}, need {}", vals.len())));
        }
        ptr::copy_nonoverlapping(vals.as_ptr(), out, vals.len());
        DladmmStatus::Ok
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dladmm_model_free(model: *mut DladmmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the built-in self-check suite; returns the number of failed checks.
#[no_mangle]
pub extern "C" fn dladmm_selfcheck(quick: bool) -> usize {
    catch_unwind(|| run_selfcheck(quick, None).iter().filter(|c| !c.passed).count()).unwrap_or(usize::MAX)
}
