//! C ABI over `attn-ib`.
//!
//! Objects cross the boundary as opaque handles created by `aib_*_new` or
//! `aib_*` constructors and released with the matching `aib_*_free`. Every
//! fallible call returns an [`AibStatus`]; on failure the message is
//! available from [`aib_last_error_message`] on the same thread. Matrices
//! are row-major `d × d` arrays of `f64`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use attn_ib::datagen::{gd_counterexample, gen_dm, gen_orthogonal, init_params, DmGenConfig, InitMode, OrthoGenConfig};
use attn_ib::harness::{export_trace, read_json, write_json};
use attn_ib::metrics::{References, TraceRecord, TrainMode};
use attn_ib::model::{evaluate, ExpLoss, ModelParams, TokenDataset};
use attn_ib::numerics::Matrix;
use attn_ib::optim::{train_with_mode, StepSizeRule, Termination, Trace, TrainConfig, TrainError};
use attn_ib::svm::{solve_u_svm, solve_w_svm, SvmOptions, SvmSolution};
use attn_ib::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AibStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    DimensionMismatch = 3,
    NonUniqueOpt = 4,
    Config = 5,
    Io = 6,
    Parse = 7,
    Infeasible = 8,
    Diverged = 9,
    OutOfRange = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AibRuleKind {
    Gd = 0,
    Ngd = 1,
    NgdDecayed = 2,
    Polyak = 3,
    NgdMomentum = 4,
}

/// Step-size rule. `eta_max` is ignored when NaN; fields a rule does not
/// use are ignored.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct AibRule {
    pub kind: AibRuleKind,
    pub eta: f64,
    pub eta_max: f64,
    pub beta: f64,
    pub p_u: f64,
    pub p_w: f64,
    pub eta_scale: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AibMode {
    WOnly = 0,
    Joint = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AibTermination {
    Completed = 0,
    Stationary = 1,
    Diverged = 2,
}

/// One trace row. Absent values are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AibRecord {
    pub t: u64,
    pub loss: f64,
    pub log_loss: f64,
    pub w_norm: f64,
    pub u_norm: f64,
    pub align_w: f64,
    pub align_u_margin: f64,
    pub mean_opt_softmax: f64,
    pub min_opt_softmax: f64,
    pub token_gap: f64,
    pub loss_ratio: f64,
    pub grad_w_norm: f64,
    pub grad_u_norm: f64,
    pub eta_w: f64,
    pub eta_u: f64,
}

pub struct AibDataset(TokenDataset);

pub struct AibSvmSolution(SvmSolution);

pub struct AibTrace {
    trace: Trace,
    n: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(AibStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) | Error::UndefinedDirection(_) | Error::MissingConstant(_) => AibStatus::InvalidInput,
            Error::DimensionMismatch { .. } => AibStatus::DimensionMismatch,
            Error::NonUniqueOpt { .. } => AibStatus::NonUniqueOpt,
            Error::Config(_) => AibStatus::Config,
            Error::Io { .. } => AibStatus::Io,
            Error::Json(_) | Error::Csv(_) => AibStatus::Parse,
        };
        Fail(status, e.to_string())
    }
}

fn fail<T>(status: AibStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AibStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AibStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("panic inside attn-ib");
            AibStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: caller passes either null or a live handle from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(AibStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(AibStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: caller guarantees `len` readable values.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return fail(AibStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: caller guarantees `len` writable values.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return fail(AibStatus::NullPointer, "output pointer is null");
    }
    // SAFETY: checked non-null; caller owns the slot.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

unsafe fn write<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return fail(AibStatus::NullPointer, "output pointer is null");
    }
    // SAFETY: checked non-null.
    unsafe { *out = value };
    Ok(())
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return fail(AibStatus::NullPointer, "path is null");
    }
    // SAFETY: caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Fail(AibStatus::InvalidInput, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn aib_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aib_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Dataset from row-major tokens (`n·T·d`), labels (`n`, each ±1) and
/// `u★` (`d`); optimal tokens are the strict score argmax.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn aib_dataset_new(
    n: usize,
    t: usize,
    d: usize,
    tokens: *const f64,
    labels: *const f64,
    u_star: *const f64,
    out: *mut *mut AibDataset,
) -> AibStatus {
    guard(|| {
        let len = n.checked_mul(t).and_then(|x| x.checked_mul(d)).ok_or_else(|| Fail(AibStatus::InvalidInput, "size overflow".into()))?;
        let tokens = unsafe { slice(tokens, len, "tokens")? }.to_vec();
        let labels = unsafe { slice(labels, n, "labels")? }.to_vec();
        let u_star = unsafe { slice(u_star, d, "u_star")? }.to_vec();
        let ds = TokenDataset::with_scored_opt(t, d, tokens, labels, u_star)?;
        unsafe { put(out, AibDataset(ds)) }
    })
}

/// Near-orthogonal synthetic data.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aib_dataset_gen_orthogonal(
    n: usize,
    t: usize,
    d: usize,
    signal: f64,
    sigma: f64,
    rho: f64,
    seed: u64,
    out: *mut *mut AibDataset,
) -> AibStatus {
    guard(|| {
        let ds = gen_orthogonal(&OrthoGenConfig { n, t, d, signal, sigma, rho, seed })?;
        unsafe { put(out, AibDataset(ds)) }
    })
}

/// Gaussian data model with `u★ = e₁`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aib_dataset_gen_dm(n: usize, t: usize, d: usize, alpha: f64, rho: f64, seed: u64, out: *mut *mut AibDataset) -> AibStatus {
    guard(|| {
        let (ds, _) = gen_dm(&DmGenConfig { n, t, d, alpha, rho, seed, u_star: None })?;
        unsafe { put(out, AibDataset(ds)) }
    })
}

/// The two-token instance on which GD aligns only logarithmically.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aib_dataset_counterexample(out: *mut *mut AibDataset) -> AibStatus {
    guard(|| unsafe { put(out, AibDataset(gd_counterexample())) })
}

/// # Safety
/// `file` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn aib_dataset_load_json(file: *const c_char, out: *mut *mut AibDataset) -> AibStatus {
    guard(|| {
        let ds: TokenDataset = read_json(unsafe { path(file)? })?;
        unsafe { put(out, AibDataset(ds)) }
    })
}

/// # Safety
/// `ds` must be a live handle; `file` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn aib_dataset_save_json(ds: *const AibDataset, file: *const c_char) -> AibStatus {
    guard(|| {
        let ds = unsafe { get(ds, "dataset")? };
        Ok(write_json(unsafe { path(file)? }, &ds.0)?)
    })
}

/// Writes `n`, `T` and `d`; any output may be null.
///
/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn aib_dataset_shape(ds: *const AibDataset, n: *mut usize, t: *mut usize, d: *mut usize) -> AibStatus {
    guard(|| {
        let ds = &unsafe { get(ds, "dataset")? }.0;
        for (p, v) in [(n, ds.n()), (t, ds.seq_len()), (d, ds.dim())] {
            if !p.is_null() {
                unsafe { *p = v };
            }
        }
        Ok(())
    })
}

/// Optimal-token index (0-based) of sample `i`.
///
/// # Safety
/// `ds` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn aib_dataset_opt(ds: *const AibDataset, i: usize, out: *mut usize) -> AibStatus {
    guard(|| {
        let ds = &unsafe { get(ds, "dataset")? }.0;
        if i >= ds.n() {
            return fail(AibStatus::OutOfRange, format!("sample {i} out of range"));
        }
        unsafe { write(out, ds.opt(i)) }
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aib_dataset_free(ds: *mut AibDataset) {
    unsafe { free(ds) }
}

unsafe fn params(d: usize, u: *const f64, w: *const f64) -> Result<ModelParams, Fail> {
    let u = unsafe { slice(u, d, "u")? }.to_vec();
    let w = Matrix::from_vec(d, d, unsafe { slice(w, d * d, "w")? }.to_vec())?;
    Ok(ModelParams::new(u, w)?)
}

/// Mean exponential loss and gradients at `(u, W)`. `grad_u` (`d`) and
/// `grad_w` (`d·d`) may be null.
///
/// # Safety
/// `u` has `d` values and `w` has `d·d`; outputs likewise when non-null.
#[no_mangle]
pub unsafe extern "C" fn aib_loss_and_grad(
    ds: *const AibDataset,
    u: *const f64,
    w: *const f64,
    loss: *mut f64,
    grad_u: *mut f64,
    grad_w: *mut f64,
) -> AibStatus {
    guard(|| {
        let ds = &unsafe { get(ds, "dataset")? }.0;
        let d = ds.dim();
        let p = unsafe { params(d, u, w)? };
        let ev = evaluate(&ExpLoss, &p, ds)?;
        unsafe { write(loss, ev.report.mean_loss)? };
        if !grad_u.is_null() {
            unsafe { slice_mut(grad_u, d, "grad_u")? }.copy_from_slice(&ev.grad_u);
        }
        if !grad_w.is_null() {
            unsafe { slice_mut(grad_w, d * d, "grad_w")? }.copy_from_slice(ev.grad_w.as_slice());
        }
        Ok(())
    })
}

unsafe fn solve(ds: *const AibDataset, out: *mut *mut AibSvmSolution, w: bool) -> AibStatus {
    guard(|| {
        let ds = &unsafe { get(ds, "dataset")? }.0;
        let opts = SvmOptions::default();
        let sol = if w { solve_w_svm(ds, &opts)? } else { solve_u_svm(ds, &opts)? };
        unsafe { put(out, AibSvmSolution(sol)) }
    })
}

/// Max-margin attention matrix. An infeasible problem still yields a
/// handle; query it with [`aib_svm_feasible`].
///
/// # Safety
/// `ds` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn aib_solve_w_svm(ds: *const AibDataset, out: *mut *mut AibSvmSolution) -> AibStatus {
    unsafe { solve(ds, out, true) }
}

/// Max-margin classifier over optimal tokens.
///
/// # Safety
/// `ds` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn aib_solve_u_svm(ds: *const AibDataset, out: *mut *mut AibSvmSolution) -> AibStatus {
    unsafe { solve(ds, out, false) }
}

/// # Safety
/// `sol` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn aib_svm_feasible(sol: *const AibSvmSolution, out: *mut bool) -> AibStatus {
    guard(|| unsafe { write(out, get(sol, "solution")?.0.feasible) })
}

/// Norm, margin and KKT residual; any output may be null.
///
/// # Safety
/// `sol` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn aib_svm_stats(sol: *const AibSvmSolution, norm: *mut f64, margin: *mut f64, kkt_residual: *mut f64) -> AibStatus {
    guard(|| {
        let s = &unsafe { get(sol, "solution")? }.0;
        if !s.feasible {
            return fail(AibStatus::Infeasible, "problem is infeasible");
        }
        for (p, v) in [(norm, s.norm), (margin, s.margin), (kkt_residual, s.kkt_residual)] {
            if !p.is_null() {
                unsafe { *p = v };
            }
        }
        Ok(())
    })
}

/// Copies the solution (row-major matrix or vector) into `buf`. With a
/// null `buf`, only the required length is written to `len`.
///
/// # Safety
/// `sol` must be a live handle; `buf` must hold `*len` values.
#[no_mangle]
pub unsafe extern "C" fn aib_svm_solution(sol: *const AibSvmSolution, buf: *mut f64, len: *mut usize) -> AibStatus {
    guard(|| {
        let s = &unsafe { get(sol, "solution")? }.0;
        let values: Vec<f64> = match (s.matrix(), s.vector()) {
            (Some(m), _) => m.into_vec(),
            (None, Some(v)) => v.to_vec(),
            _ => return fail(AibStatus::Infeasible, "problem is infeasible"),
        };
        if len.is_null() {
            return fail(AibStatus::NullPointer, "len is null");
        }
        let cap = unsafe { *len };
        unsafe { *len = values.len() };
        if buf.is_null() {
            return Ok(());
        }
        if cap < values.len() {
            return fail(AibStatus::OutOfRange, format!("buffer holds {cap} values, need {}", values.len()));
        }
        unsafe { slice_mut(buf, values.len(), "buf")? }.copy_from_slice(&values);
        Ok(())
    })
}

/// # Safety
/// `sol` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aib_svm_free(sol: *mut AibSvmSolution) {
    unsafe { free(sol) }
}

fn rule(r: &AibRule) -> StepSizeRule {
    let cap = (!r.eta_max.is_nan()).then_some(r.eta_max);
    match r.kind {
        AibRuleKind::Gd => StepSizeRule::Gd { eta: r.eta },
        AibRuleKind::Ngd => StepSizeRule::Ngd { eta: r.eta, eta_max: cap },
        AibRuleKind::NgdDecayed => StepSizeRule::NgdDecayed { eta: r.eta, p_u: r.p_u, p_w: r.p_w },
        AibRuleKind::Polyak => StepSizeRule::Polyak { eta_scale: r.eta_scale, eta_max: r.eta_max },
        AibRuleKind::NgdMomentum => StepSizeRule::NgdMomentum { eta: r.eta, beta: r.beta, eta_max: cap },
    }
}

/// Trains from `W₀` (`d·d`, null for zero) with `u₀ = 0`; in W-only mode
/// `u` is pinned to `u★`. Alignment metrics use the W-SVM solution when
/// feasible. A diverged run still yields its trace with
/// `AIB_STATUS_DIVERGED`.
///
/// # Safety
/// `ds` must be a live handle, `r` valid, `w0` null or `d·d` values.
#[no_mangle]
pub unsafe extern "C" fn aib_train(
    ds: *const AibDataset,
    r: *const AibRule,
    mode: AibMode,
    steps: u64,
    stride: u64,
    w0: *const f64,
    out: *mut *mut AibTrace,
) -> AibStatus {
    guard(|| {
        let ds = &unsafe { get(ds, "dataset")? }.0;
        let rule = rule(unsafe { get(r, "rule")? });
        rule.validate()?;
        let d = ds.dim();
        let init = if w0.is_null() {
            init_params(d, &InitMode::Zero, 0)?
        } else {
            ModelParams::new(vec![0.0; d], Matrix::from_vec(d, d, unsafe { slice(w0, d * d, "w0")? }.to_vec())?)?
        };
        let mode = match mode {
            AibMode::WOnly => TrainMode::WOnly,
            AibMode::Joint => TrainMode::Joint,
        };
        let opts = SvmOptions::default();
        let refs = References {
            w_mm: solve_w_svm(ds, &opts)?.matrix(),
            u_mm: if mode == TrainMode::Joint { solve_u_svm(ds, &opts)?.vector().map(<[f64]>::to_vec) } else { None },
        };
        let cfg = TrainConfig::new(rule, steps, mode).stride(stride.max(1));
        match train_with_mode(ds, &init, &cfg, &refs) {
            Ok(trace) => unsafe { put(out, AibTrace { trace, n: ds.n() }) },
            Err(TrainError::Setup(e)) => Err(e.into()),
            Err(TrainError::Diverged { t, reason, trace }) => {
                unsafe { put(out, AibTrace { trace: *trace, n: ds.n() })? };
                fail(AibStatus::Diverged, format!("diverged at step {t}: {reason}"))
            }
        }
    })
}

/// # Safety
/// `tr` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn aib_trace_len(tr: *const AibTrace, out: *mut usize) -> AibStatus {
    guard(|| unsafe { write(out, get(tr, "trace")?.trace.records.len()) })
}

fn to_c(r: &TraceRecord) -> AibRecord {
    let o = |x: Option<f64>| x.unwrap_or(f64::NAN);
    AibRecord {
        t: r.t,
        loss: r.loss,
        log_loss: r.log_loss,
        w_norm: r.w_norm,
        u_norm: r.u_norm,
        align_w: o(r.align_w),
        align_u_margin: o(r.align_u_margin),
        mean_opt_softmax: r.mean_opt_softmax,
        min_opt_softmax: r.min_opt_softmax,
        token_gap: o(r.token_gap),
        loss_ratio: r.loss_ratio,
        grad_w_norm: r.grad_w_norm,
        grad_u_norm: r.grad_u_norm,
        eta_w: o(r.eta_w),
        eta_u: o(r.eta_u),
    }
}

/// # Safety
/// `tr` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn aib_trace_record(tr: *const AibTrace, index: usize, out: *mut AibRecord) -> AibStatus {
    guard(|| {
        let recs = &unsafe { get(tr, "trace")? }.trace.records;
        let r = recs.get(index).ok_or_else(|| Fail(AibStatus::OutOfRange, format!("record {index} of {}", recs.len())))?;
        unsafe { write(out, to_c(r)) }
    })
}

/// How the run ended; `step` (nullable) receives the last step for
/// stationary and diverged runs.
///
/// # Safety
/// `tr` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn aib_trace_termination(tr: *const AibTrace, out: *mut AibTermination, step: *mut u64) -> AibStatus {
    guard(|| {
        let (kind, t) = match unsafe { get(tr, "trace")? }.trace.termination {
            Termination::Completed => (AibTermination::Completed, 0),
            Termination::Stationary { t } => (AibTermination::Stationary, t),
            Termination::Diverged { t, .. } => (AibTermination::Diverged, t),
        };
        if !step.is_null() {
            unsafe { *step = t };
        }
        unsafe { write(out, kind) }
    })
}

/// Final `W` into `buf` (`d·d` values).
///
/// # Safety
/// `tr` must be a live handle; `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn aib_trace_final_w(tr: *const AibTrace, buf: *mut f64, len: usize) -> AibStatus {
    guard(|| {
        let w = unsafe { get(tr, "trace")? }.trace.final_params.w.as_slice();
        if len < w.len() {
            return fail(AibStatus::OutOfRange, format!("buffer holds {len} values, need {}", w.len()));
        }
        unsafe { slice_mut(buf, w.len(), "buf")? }.copy_from_slice(w);
        Ok(())
    })
}

/// Writes `trace.csv` and `diag.csv` into an existing directory.
///
/// # Safety
/// `tr` must be a live handle; `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn aib_trace_export(tr: *const AibTrace, dir: *const c_char) -> AibStatus {
    guard(|| {
        let tr = unsafe { get(tr, "trace")? };
        Ok(export_trace(&tr.trace.records, tr.n, unsafe { path(dir)? })?)
    })
}

/// # Safety
/// `tr` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aib_trace_free(tr: *mut AibTrace) {
    unsafe { free(tr) }
}
