//! C ABI over `tskd-core`.
//!
//! Every function returns a [`TskdStatus`]; on failure the message is kept in
//! a thread-local slot readable with [`tskd_last_error_message`]. Objects are
//! opaque handles created by `*_new`/`*_load`/`*_fit` and released by the
//! matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tskd_core::arima::{self, ArimaModel};
use tskd_core::autodiff::Graph;
use tskd_core::cli;
use tskd_core::config::ExperimentConfig;
use tskd_core::data::checkpoint::{self, NamedTensors};
use tskd_core::distill::{attention_map, knowledge_increment};
use tskd_core::schedule::{build_schedule, NodeKind, TrainingSchedule};
use tskd_core::tensor::Tensor;
use tskd_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TskdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Format = 4,
    Io = 5,
    Numeric = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TskdNodeKind {
    General = 0,
    Memory = 1,
    Review = 2,
}

pub struct TskdSchedule {
    inner: TrainingSchedule,
}

pub struct TskdArima {
    model: ArimaModel,
}

pub struct TskdCheckpoint {
    tensors: NamedTensors,
    names: Vec<CString>,
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult = Result<(), Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TskdStatus {
    match e {
        Error::Config(_) => TskdStatus::Config,
        Error::Format(_)
        | Error::Version { .. }
        | Error::Truncated { .. }
        | Error::DuplicateName(_)
        | Error::Json(_) => TskdStatus::Format,
        Error::Io { .. } | Error::Csv(_) => TskdStatus::Io,
        Error::DegenerateFit(_) | Error::NonFinite(_) => TskdStatus::Numeric,
        Error::Dimension { .. } | Error::Contract(_) | Error::Index { .. } => {
            TskdStatus::InvalidArgument
        }
    }
}

fn guard(f: impl FnOnce() -> FfiResult) -> TskdStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return TskdStatus::Ok,
        Ok(Err(Failure::Null(what))) => (TskdStatus::NullPointer, format!("null pointer: {what}")),
        Ok(Err(Failure::Arg(msg))) => (TskdStatus::InvalidArgument, msg),
        Ok(Err(Failure::Core(e))) => (status_of(&e), e.to_string()),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (TskdStatus::Panic, format!("panic: {msg}"))
        }
    };
    set_last_error(msg);
    status
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    non_null(p, what)?;
    Ok(&*p)
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    non_null(p, what)?;
    Ok(&mut *p)
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(
    p: *mut T,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn string(p: *const c_char, what: &'static str) -> Result<String, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_string)
        .map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut T, value: T, what: &'static str) -> FfiResult {
    non_null(out, what)?;
    out.write(value);
    Ok(())
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn tskd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

// ---- schedule -------------------------------------------------------------

/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn tskd_schedule_new(
    total_epochs: usize,
    delta: usize,
    k: usize,
    warmup: usize,
    out: *mut *mut TskdSchedule,
) -> TskdStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = build_schedule(total_epochs, delta, k, warmup)?;
        put(out, boxed(TskdSchedule { inner }), "out")
    })
}

/// # Safety
/// `schedule` must come from [`tskd_schedule_new`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tskd_schedule_kind(
    schedule: *const TskdSchedule,
    epoch: usize,
    out: *mut TskdNodeKind,
) -> TskdStatus {
    guard(|| {
        let s = handle(schedule, "schedule")?;
        if epoch >= s.inner.total_epochs {
            return Err(Failure::Arg(format!(
                "epoch {epoch} beyond {} epochs",
                s.inner.total_epochs
            )));
        }
        let kind = match s.inner.kind(epoch) {
            NodeKind::General => TskdNodeKind::General,
            NodeKind::Memory => TskdNodeKind::Memory,
            NodeKind::Review => TskdNodeKind::Review,
        };
        put(out, kind, "out")
    })
}

/// # Safety
/// `schedule` must come from [`tskd_schedule_new`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tskd_schedule_cycle_len(
    schedule: *const TskdSchedule,
    out: *mut usize,
) -> TskdStatus {
    guard(|| put(out, handle(schedule, "schedule")?.inner.cycle_len(), "out"))
}

/// Writes up to `cap` memory epochs of review epoch `epoch` into `epochs`
/// and their count into `count`.
///
/// # Safety
/// `epochs` must hold `cap` elements; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tskd_schedule_memories_for_review(
    schedule: *const TskdSchedule,
    epoch: usize,
    epochs: *mut usize,
    cap: usize,
    count: *mut usize,
) -> TskdStatus {
    guard(|| {
        let s = handle(schedule, "schedule")?;
        let mem = s.inner.memory_epochs_for_review(epoch)?;
        if mem.len() > cap {
            return Err(Failure::Arg(format!(
                "need room for {} epochs, got {cap}",
                mem.len()
            )));
        }
        slice_mut(epochs, mem.len(), "epochs")?.copy_from_slice(&mem);
        put(count, mem.len(), "count")
    })
}

/// # Safety
/// `schedule` must come from [`tskd_schedule_new`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn tskd_schedule_free(schedule: *mut TskdSchedule) {
    free(schedule)
}

// ---- ARIMA ----------------------------------------------------------------

/// # Safety
/// `series` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tskd_arima_fit(
    series: *const f64,
    len: usize,
    p: usize,
    d: usize,
    q: usize,
    out: *mut *mut TskdArima,
) -> TskdStatus {
    guard(|| {
        non_null(out, "out")?;
        let model = arima::fit_arima(slice(series, len, "series")?, p, d, q)?;
        put(out, boxed(TskdArima { model }), "out")
    })
}

/// Copies `p` AR and `q` MA coefficients (caller sizes the buffers from the
/// fitted order) and the intercept and innovation variance.
///
/// # Safety
/// `ar` and `ma` must hold the fitted order's `p` and `q` values.
#[no_mangle]
pub unsafe extern "C" fn tskd_arima_coefficients(
    model: *const TskdArima,
    ar: *mut f64,
    ma: *mut f64,
    intercept: *mut f64,
    sigma2: *mut f64,
) -> TskdStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        slice_mut(ar, m.ar.len(), "ar")?.copy_from_slice(&m.ar);
        slice_mut(ma, m.ma.len(), "ma")?.copy_from_slice(&m.ma);
        put(intercept, m.intercept, "intercept")?;
        put(sigma2, m.sigma2, "sigma2")
    })
}

/// Forecast `horizon` values following `history` into `out`.
///
/// # Safety
/// `history` must hold `len` values and `out` `horizon` values.
#[no_mangle]
pub unsafe extern "C" fn tskd_arima_forecast(
    model: *const TskdArima,
    history: *const f64,
    len: usize,
    horizon: usize,
    out: *mut f64,
) -> TskdStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        let f = arima::forecast(m, slice(history, len, "history")?, horizon)?;
        slice_mut(out, horizon, "out")?.copy_from_slice(&f);
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`tskd_arima_fit`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn tskd_arima_free(model: *mut TskdArima) {
    free(model)
}

// ---- checkpoints ----------------------------------------------------------

impl TskdCheckpoint {
    fn new(tensors: NamedTensors) -> Result<Self, Failure> {
        let names = tensors
            .iter()
            .map(|(n, _)| {
                CString::new(n.as_str())
                    .map_err(|_| Failure::Arg(format!("tensor name `{n}` holds a nul byte")))
            })
            .collect::<Result<_, _>>()?;
        Ok(TskdCheckpoint { tensors, names })
    }

    fn entry(&self, index: usize) -> Result<&Tensor<f32>, Failure> {
        self.tensors.get(index).map(|(_, t)| t).ok_or_else(|| {
            Failure::Arg(format!(
                "tensor index {index} out of range for {} tensors",
                self.tensors.len()
            ))
        })
    }
}

/// An empty tensor collection.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tskd_checkpoint_new(out: *mut *mut TskdCheckpoint) -> TskdStatus {
    guard(|| put(out, boxed(TskdCheckpoint::new(Vec::new())?), "out"))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tskd_checkpoint_load(
    path: *const c_char,
    out: *mut *mut TskdCheckpoint,
) -> TskdStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = PathBuf::from(string(path, "path")?);
        let ckpt = TskdCheckpoint::new(checkpoint::load_checkpoint(&path)?)?;
        put(out, boxed(ckpt), "out")
    })
}

/// Append a tensor; names must be unique.
///
/// # Safety
/// `shape` must hold `rank` extents and `data` their product of values.
#[no_mangle]
pub unsafe extern "C" fn tskd_checkpoint_push(
    ckpt: *mut TskdCheckpoint,
    name: *const c_char,
    shape: *const usize,
    rank: usize,
    data: *const f32,
) -> TskdStatus {
    guard(|| {
        let c = handle_mut(ckpt, "checkpoint")?;
        let name = string(name, "name")?;
        if c.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::DuplicateName(name).into());
        }
        let shape = slice(shape, rank, "shape")?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Failure::Arg(format!("shape {shape:?} overflows")))?;
        let t = Tensor::new(shape, slice(data, numel, "data")?.to_vec())?;
        let cname = CString::new(name.as_str())
            .map_err(|_| Failure::Arg("name holds a nul byte".into()))?;
        c.tensors.push((name, t));
        c.names.push(cname);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tskd_checkpoint_save(
    ckpt: *const TskdCheckpoint,
    path: *const c_char,
) -> TskdStatus {
    guard(|| {
        let c = handle(ckpt, "checkpoint")?;
        let path = PathBuf::from(string(path, "path")?);
        checkpoint::save_checkpoint(&path, c.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tskd_checkpoint_len(
    ckpt: *const TskdCheckpoint,
    out: *mut usize,
) -> TskdStatus {
    guard(|| put(out, handle(ckpt, "checkpoint")?.tensors.len(), "out"))
}

/// Borrowed name of tensor `index`, valid while the handle lives.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tskd_checkpoint_name(
    ckpt: *const TskdCheckpoint,
    index: usize,
    out: *mut *const c_char,
) -> TskdStatus {
    guard(|| {
        let c = handle(ckpt, "checkpoint")?;
        c.entry(index)?;
        put(out, c.names[index].as_ptr(), "out")
    })
}

/// Writes the rank into `rank` and up to `cap` extents into `shape`.
///
/// # Safety
/// `shape` must hold `cap` elements; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tskd_checkpoint_shape(
    ckpt: *const TskdCheckpoint,
    index: usize,
    shape: *mut usize,
    cap: usize,
    rank: *mut usize,
) -> TskdStatus {
    guard(|| {
        let t = handle(ckpt, "checkpoint")?.entry(index)?;
        put(rank, t.rank(), "rank")?;
        if t.rank() > cap {
            return Err(Failure::Arg(format!(
                "rank {} exceeds buffer of {cap}",
                t.rank()
            )));
        }
        slice_mut(shape, t.rank(), "shape")?.copy_from_slice(t.shape());
        Ok(())
    })
}

/// Borrowed values of tensor `index`, valid until the handle is modified or
/// freed.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tskd_checkpoint_data(
    ckpt: *const TskdCheckpoint,
    index: usize,
    data: *mut *const f32,
    len: *mut usize,
) -> TskdStatus {
    guard(|| {
        let t = handle(ckpt, "checkpoint")?.entry(index)?;
        put(data, t.data().as_ptr(), "data")?;
        put(len, t.numel(), "len")
    })
}

/// # Safety
/// `ckpt` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn tskd_checkpoint_free(ckpt: *mut TskdCheckpoint) {
    free(ckpt)
}

// ---- distillation primitives on raw buffers -------------------------------

fn extents(dims: &[usize]) -> Result<usize, Failure> {
    if dims.contains(&0) {
        return Err(Failure::Arg(format!(
            "extents must be positive, got {dims:?}"
        )));
    }
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Failure::Arg(format!("extents {dims:?} overflow")))
}

/// Attention map of `features: [n, c, h, w]` into `out: [n, h, w]`.
///
/// # Safety
/// `features` must hold `n·c·h·w` values and `out` `n·h·w`.
#[no_mangle]
pub unsafe extern "C" fn tskd_attention_map(
    features: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    normalize: bool,
    out: *mut f32,
) -> TskdStatus {
    guard(|| {
        let len = extents(&[n, c, h, w])?;
        let x = Tensor::new(&[n, c, h, w], slice(features, len, "features")?.to_vec())?;
        let mut g = Graph::new();
        let v = g.constant(x);
        let map = attention_map(&mut g, v, normalize)?;
        slice_mut(out, n * h * w, "out")?.copy_from_slice(g.value(map.values).data());
        Ok(())
    })
}

/// `|later - earlier|` for two attention maps of shape `[n, h, w]`.
///
/// # Safety
/// `earlier`, `later` and `out` must each hold `n·h·w` values.
#[no_mangle]
pub unsafe extern "C" fn tskd_knowledge_increment(
    earlier: *const f32,
    later: *const f32,
    n: usize,
    h: usize,
    w: usize,
    out: *mut f32,
) -> TskdStatus {
    guard(|| {
        let len = extents(&[n, h, w])?;
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(
            &[n, h, w],
            slice(earlier, len, "earlier")?.to_vec(),
        )?);
        let b = g.constant(Tensor::new(
            &[n, h, w],
            slice(later, len, "later")?.to_vec(),
        )?);
        let wrap = |values| tskd_core::distill::AttentionMap {
            values,
            normalized: false,
        };
        let inc = knowledge_increment(&mut g, &wrap(a), &wrap(b), (0, 1))?;
        slice_mut(out, len, "out")?.copy_from_slice(g.value(inc.values).data());
        Ok(())
    })
}

// ---- experiment commands --------------------------------------------------

unsafe fn load_config(path: *const c_char) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::load(&PathBuf::from(string(
        path,
        "config_path",
    )?))?)
}

/// Run `train-teacher` from a JSON config file.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tskd_train_teacher(config_path: *const c_char) -> TskdStatus {
    guard(|| {
        cli::train_teacher(&load_config(config_path)?)?;
        Ok(())
    })
}

/// Run `distill` from a JSON config file; writes the best test accuracy to
/// `best_test_acc` when it is not NULL.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tskd_distill(
    config_path: *const c_char,
    resume: bool,
    best_test_acc: *mut f64,
) -> TskdStatus {
    guard(|| {
        let summary = cli::distill(&load_config(config_path)?, resume)?;
        if !best_test_acc.is_null() {
            best_test_acc.write(summary.best_test_acc);
        }
        Ok(())
    })
}

/// Run `probe-arima` from a JSON config file.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tskd_probe_arima(config_path: *const c_char) -> TskdStatus {
    guard(|| {
        cli::probe_arima(&load_config(config_path)?)?;
        Ok(())
    })
}
