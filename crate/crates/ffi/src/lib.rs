//! C ABI over the `muchgcn` engine.
//!
//! Every fallible call returns an [`MgStatus`]; on failure the message is
//! kept per thread and can be fetched with [`mg_last_error`]. Handles are
//! opaque and owned by the caller once returned, and each has a matching
//! `_free`. Strings returned by the library must be released with
//! [`mg_string_free`].

#![deny(unsafe_op_in_unsafe_fn)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use muchgcn::config::RunConfig;
use muchgcn::experiment::run_experiment_on;
use muchgcn::graphio::{generate_synthetic, parse_tu_dataset, Batch, Dataset, FeatureMode, SyntheticFamily};
use muchgcn::{Error, Model};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    DatasetError = 4,
    IoError = 5,
    ShapeError = 6,
    NumericError = 7,
    CheckpointError = 8,
    OutOfRange = 9,
    Panic = 10,
}

/// Node-feature recipe for TU datasets.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MgFeatures {
    /// One-hot node labels.
    Bio = 0,
    /// One-hot degree plus clustering coefficient.
    Social = 1,
    /// Degree and clustering coefficient.
    Structural = 2,
}

/// Synthetic graph family.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MgFamily {
    CyclesVsChords = 0,
    KCommunities = 1,
}

/// Opaque dataset handle.
pub struct MgDataset(Dataset);

/// Opaque model handle.
pub struct MgModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MgStatus {
    match e {
        Error::Shape { .. } | Error::NonScalarLoss(_) | Error::FullyMasked { .. } | Error::EmptyReduction(_) => {
            MgStatus::ShapeError
        }
        Error::NonFinite { .. } => MgStatus::NumericError,
        Error::MissingFile(_) | Error::Io(_) => MgStatus::IoError,
        Error::Parse { .. } | Error::Dataset(_) => MgStatus::DatasetError,
        Error::Config(_) | Error::Json(_) => MgStatus::InvalidConfig,
        Error::Checkpoint(_) => MgStatus::CheckpointError,
        Error::LabelOutOfRange { .. } => MgStatus::OutOfRange,
    }
}

struct Fail(MgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MgStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            MgStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MgStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and NUL-terminated per the caller's contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(MgStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or a live handle from this library.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: the caller passes a handle created by this library.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    // SAFETY: `out` is non-null and points to writable storage for a pointer.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Library version; a static string that must not be freed.
#[no_mangle]
pub extern "C" fn mg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if none. The
/// returned copy is owned by the caller.
#[no_mangle]
pub extern "C" fn mg_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` is null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mg_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: allocated by `CString::into_raw` in this library.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Parses the TU dataset `name` in directory `dir`. `max_nodes` of 0 keeps
/// every graph; otherwise larger graphs are dropped.
///
/// # Safety
/// `dir` and `name` are NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mg_dataset_load_tu(
    dir: *const c_char,
    name: *const c_char,
    features: MgFeatures,
    max_nodes: usize,
    out: *mut *mut MgDataset,
) -> MgStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let (dir, name) = unsafe { (str_arg(dir, "dir")?, str_arg(name, "name")?) };
        let mode = match features {
            MgFeatures::Bio => FeatureMode::Bio,
            MgFeatures::Social => FeatureMode::Social,
            MgFeatures::Structural => FeatureMode::Structural,
        };
        let raw = parse_tu_dataset(PathBuf::from(dir), name)?;
        let ds = Dataset::from_raw(&raw, mode, (max_nodes > 0).then_some(max_nodes))?;
        write_out(out, MgDataset(ds))
    })
}

/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mg_dataset_generate(
    family: MgFamily,
    count: usize,
    seed: u64,
    out: *mut *mut MgDataset,
) -> MgStatus {
    guard(|| {
        let family = match family {
            MgFamily::CyclesVsChords => SyntheticFamily::CyclesVsChords,
            MgFamily::KCommunities => SyntheticFamily::KCommunities,
        };
        write_out(out, MgDataset(generate_synthetic(family, count, seed)?))
    })
}

/// Number of graphs, or 0 for a null handle.
///
/// # Safety
/// `ds` is null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn mg_dataset_len(ds: *const MgDataset) -> usize {
    // SAFETY: forwarded caller contract.
    unsafe { ds.as_ref() }.map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` is null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn mg_dataset_num_classes(ds: *const MgDataset) -> usize {
    // SAFETY: forwarded caller contract.
    unsafe { ds.as_ref() }.map_or(0, |d| d.0.num_classes)
}

/// Graph label at `index`, or -1 when out of range or null.
///
/// # Safety
/// `ds` is null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn mg_dataset_label(ds: *const MgDataset, index: usize) -> i64 {
    // SAFETY: forwarded caller contract.
    unsafe { ds.as_ref() }
        .and_then(|d| d.0.graphs.get(index))
        .map_or(-1, |g| g.label as i64)
}

/// # Safety
/// `ds` is null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mg_dataset_free(ds: *mut MgDataset) {
    if !ds.is_null() {
        // SAFETY: allocated by `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(ds) });
    }
}

fn run_config(json: &str) -> Result<RunConfig, Fail> {
    Ok(RunConfig::from_json(json)?)
}

/// Fresh model for `ds` from the `model` and `train` sections of a run
/// config given as JSON (`"{}"` takes every default).
///
/// # Safety
/// `config_json` is a NUL-terminated string, `ds` a live handle, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mg_model_new(
    config_json: *const c_char,
    ds: *const MgDataset,
    seed: u64,
    out: *mut *mut MgModel,
) -> MgStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let (json, ds) = unsafe { (str_arg(config_json, "config_json")?, handle(ds, "dataset")?) };
        let cfg = run_config(json)?.model_config(&ds.0)?;
        write_out(out, MgModel(Model::new(cfg, seed)?))
    })
}

/// Loads a checkpoint written for the architecture that `config_json`
/// yields on `ds`.
///
/// # Safety
/// `config_json` and `path` are NUL-terminated strings, `ds` a live handle,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mg_model_load(
    config_json: *const c_char,
    ds: *const MgDataset,
    path: *const c_char,
    out: *mut *mut MgModel,
) -> MgStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let (json, ds, path) = unsafe {
            (
                str_arg(config_json, "config_json")?,
                handle(ds, "dataset")?,
                str_arg(path, "path")?,
            )
        };
        let cfg = run_config(json)?.model_config(&ds.0)?;
        write_out(out, MgModel(Model::load(cfg, &PathBuf::from(path))?))
    })
}

/// # Safety
/// `model` is a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mg_model_save(model: *const MgModel, path: *const c_char) -> MgStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let (model, path) = unsafe { (handle(model, "model")?, str_arg(path, "path")?) };
        model.0.save(&PathBuf::from(path))?;
        Ok(())
    })
}

/// # Safety
/// `model` is null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn mg_model_num_classes(model: *const MgModel) -> usize {
    // SAFETY: forwarded caller contract.
    unsafe { model.as_ref() }.map_or(0, |m| m.0.config.num_classes)
}

/// Eval-mode logits of graph `index` of `ds`, written to `logits[0..len]`.
/// `len` must equal the model's class count.
///
/// # Safety
/// `model` and `ds` are live handles; `logits` points to `len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn mg_model_predict(
    model: *const MgModel,
    ds: *const MgDataset,
    index: usize,
    logits: *mut f64,
    len: usize,
) -> MgStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let (model, ds) = unsafe { (handle(model, "model")?, handle(ds, "dataset")?) };
        if logits.is_null() {
            return Err(null("logits"));
        }
        let classes = model.0.config.num_classes;
        if len != classes {
            return Err(Fail(
                MgStatus::ShapeError,
                format!("logits buffer holds {len}, model has {classes} classes"),
            ));
        }
        let g = ds.0.graphs.get(index).ok_or_else(|| {
            Fail(
                MgStatus::OutOfRange,
                format!("graph {index} of {}", ds.0.len()),
            )
        })?;
        let row = model.0.predict(&Batch::single(g, model.0.config.max_nodes)?)?;
        // SAFETY: `logits` holds `len` doubles per the caller's contract.
        unsafe { std::slice::from_raw_parts_mut(logits, len) }.copy_from_slice(&row[0]);
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mg_model_free(model: *mut MgModel) {
    if !model.is_null() {
        // SAFETY: allocated by `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Cross-validates on `ds` with the run config in `config_json` and
/// returns the summary as a JSON string owned by the caller. Output paths
/// in the config are honored.
///
/// # Safety
/// `config_json` is a NUL-terminated string, `ds` a live handle,
/// `summary_json` writable.
#[no_mangle]
pub unsafe extern "C" fn mg_train_cv(
    config_json: *const c_char,
    ds: *const MgDataset,
    parallel_folds: usize,
    summary_json: *mut *mut c_char,
) -> MgStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let (json, ds) = unsafe { (str_arg(config_json, "config_json")?, handle(ds, "dataset")?) };
        if summary_json.is_null() {
            return Err(null("summary_json"));
        }
        let summary = run_experiment_on(&run_config(json)?, &ds.0, parallel_folds)?;
        let text = serde_json::to_string(&summary).map_err(Error::from)?;
        let c = CString::new(text).map_err(|e| Fail(MgStatus::InvalidConfig, e.to_string()))?;
        // SAFETY: checked non-null above.
        unsafe { *summary_json = c.into_raw() };
        Ok(())
    })
}
