//! C ABI for the queueseq toolkit.
//!
//! The surface mirrors the file-based workflow of the CLI: simulate event
//! tables to JSONL, load datasets and model checkpoints behind opaque
//! handles, evaluate losses, and sample trajectories from a trained
//! model. All functions return an explicit status code (or null for
//! constructors); the last error message is kept per thread and can be
//! fetched with [`qs_last_error`].
//!
//! The C header is generated into `include/queueseq.h` at build time.

use queueseq::eval::{model_losses, valid_fraction};
use queueseq::events::{EventSchema, Trajectory};
use queueseq::io::{read_jsonl, write_jsonl};
use queueseq::oracle::mm1_optimal_losses;
use queueseq::queuesim::{sample_dataset, SystemConfig};
use queueseq::rng::SplitMix64;
use queueseq::seqmodel::{
    encode_trajectory, generate, load_checkpoint, GenerateOptions, ModelParams,
};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Status codes returned by fallible calls.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QsStatus {
    Ok = 0,
    InvalidArgument = 1,
    IoError = 2,
    ParseError = 3,
    InternalError = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Loaded event-table dataset (schema plus trajectories).
pub struct QsDataset {
    schema: EventSchema,
    trajectories: Vec<Trajectory>,
}

/// Loaded model checkpoint.
pub struct QsModel {
    params: ModelParams,
}

/// Crate version as a static NUL-terminated string; do not free.
#[no_mangle]
pub extern "C" fn qs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`). Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null with
/// `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn qs_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, QsStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(QsStatus::InvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        QsStatus::InvalidArgument
    })
}

/// Simulate `n_trajectories` event tables of `n_events` each and write
/// them as JSONL. `config_json` is the tagged system object accepted by
/// the CLI (e.g. `{"type":"mmn","lambdas":[0.5],"nus":[1.0],"n_servers":1}`).
///
/// # Safety
/// `config_json` and `out_path` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn qs_simulate(
    config_json: *const c_char,
    n_trajectories: u64,
    n_events: u64,
    seed: u64,
    out_path: *const c_char,
) -> QsStatus {
    let config = match cstr(config_json, "config_json") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let path = match cstr(out_path, "out_path") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let system: SystemConfig = match serde_json::from_str(config) {
        Ok(s) => s,
        Err(e) => {
            set_error(&format!("bad system config: {e}"));
            return QsStatus::ParseError;
        }
    };
    let trajs = match sample_dataset(
        &system,
        None,
        n_trajectories as usize,
        n_events as usize,
        seed,
    ) {
        Ok(t) => t,
        Err(e) => {
            set_error(&e.to_string());
            return QsStatus::InvalidArgument;
        }
    };
    match write_jsonl(Path::new(path), &system.schema(), &trajs) {
        Ok(()) => QsStatus::Ok,
        Err(e) => {
            set_error(&e.to_string());
            QsStatus::IoError
        }
    }
}

/// Load a JSONL event-table file; returns null on failure.
///
/// # Safety
/// `path` must be a NUL-terminated string. Free the result with
/// [`qs_dataset_free`].
#[no_mangle]
pub unsafe extern "C" fn qs_dataset_load(path: *const c_char) -> *mut QsDataset {
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(_) => return std::ptr::null_mut(),
    };
    match read_jsonl(Path::new(path)) {
        Ok((schema, trajectories)) => Box::into_raw(Box::new(QsDataset {
            schema,
            trajectories,
        })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `ds` must come from [`qs_dataset_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn qs_dataset_free(ds: *mut QsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of trajectories in the dataset.
///
/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn qs_dataset_len(ds: *const QsDataset) -> u64 {
    if ds.is_null() {
        return 0;
    }
    (*ds).trajectories.len() as u64
}

/// Fraction of trajectories that replay without a schema violation.
///
/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn qs_dataset_valid_fraction(ds: *const QsDataset) -> f64 {
    if ds.is_null() {
        set_error("dataset handle is null");
        return f64::NAN;
    }
    let ds = &*ds;
    valid_fraction(&ds.trajectories, &ds.schema)
}

/// Closed-form optimal event and time losses of an M/M/1 queue.
///
/// # Safety
/// `out_event` and `out_time` must be valid writable pointers.
#[no_mangle]
pub unsafe extern "C" fn qs_mm1_optimal_losses(
    lambda: f64,
    nu: f64,
    out_event: *mut f64,
    out_time: *mut f64,
) -> QsStatus {
    if out_event.is_null() || out_time.is_null() {
        set_error("output pointer is null");
        return QsStatus::InvalidArgument;
    }
    match mm1_optimal_losses(lambda, nu) {
        Ok((ev, tm)) => {
            *out_event = ev;
            *out_time = tm;
            QsStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            QsStatus::InvalidArgument
        }
    }
}

/// Load a model checkpoint; returns null on failure.
///
/// # Safety
/// `path` must be a NUL-terminated string. Free the result with
/// [`qs_model_free`].
#[no_mangle]
pub unsafe extern "C" fn qs_model_load(path: *const c_char) -> *mut QsModel {
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(_) => return std::ptr::null_mut(),
    };
    match load_checkpoint(Path::new(path)) {
        Ok(params) => Box::into_raw(Box::new(QsModel { params })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `model` must come from [`qs_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn qs_model_free(model: *mut QsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total number of model parameters.
///
/// # Safety
/// `model` must be a live model handle.
#[no_mangle]
pub unsafe extern "C" fn qs_model_num_params(model: *const QsModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    (*model).params.num_params() as u64
}

/// Teacher-forced losses of the model on a dataset. Outputs may be null
/// to skip individual values.
///
/// # Safety
/// `model` and `ds` must be live handles; non-null outputs must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn qs_model_eval(
    model: *const QsModel,
    ds: *const QsDataset,
    out_event_loss: *mut f64,
    out_time_sq: *mut f64,
    out_class_loss: *mut f64,
    out_time_nll: *mut f64,
) -> QsStatus {
    if model.is_null() || ds.is_null() {
        set_error("handle is null");
        return QsStatus::InvalidArgument;
    }
    let model = &*model;
    let ds = &*ds;
    let seqs: Result<Vec<_>, _> = ds
        .trajectories
        .iter()
        .map(|t| encode_trajectory(t, &ds.schema, &model.params.config))
        .collect();
    let seqs = match seqs {
        Ok(s) => s,
        Err(e) => {
            set_error(&e.to_string());
            return QsStatus::InvalidArgument;
        }
    };
    let report = model_losses(&model.params, &seqs);
    for (ptr, value) in [
        (out_event_loss, report.event_loss),
        (out_time_sq, report.time_loss),
        (out_class_loss, report.class_loss),
        (out_time_nll, report.time_nll),
    ] {
        if !ptr.is_null() {
            *ptr = value;
        }
    }
    QsStatus::Ok
}

/// Sample trajectories from a trained model and write them as JSONL.
/// The system config supplies the schema and empty initial state.
///
/// # Safety
/// `model` must be a live handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qs_model_generate(
    model: *const QsModel,
    system_config_json: *const c_char,
    n_trajectories: u64,
    n_events: u64,
    temperature: f64,
    seed: u64,
    out_path: *const c_char,
) -> QsStatus {
    if model.is_null() {
        set_error("model handle is null");
        return QsStatus::InvalidArgument;
    }
    let model = &*model;
    let config = match cstr(system_config_json, "system_config_json") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let path = match cstr(out_path, "out_path") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let system: SystemConfig = match serde_json::from_str(config) {
        Ok(s) => s,
        Err(e) => {
            set_error(&format!("bad system config: {e}"));
            return QsStatus::ParseError;
        }
    };
    let schema = system.schema();
    if schema.num_events() != model.params.config.n_event_types {
        set_error("checkpoint event vocabulary does not match the schema");
        return QsStatus::InvalidArgument;
    }
    let mut trajs = Vec::with_capacity(n_trajectories as usize);
    for j in 0..n_trajectories {
        let child = SplitMix64::stream(seed, j).next_u64();
        match generate(
            &model.params,
            &schema,
            &schema.empty_state(),
            &[],
            None,
            &GenerateOptions {
                n_events: n_events as usize,
                seed: child,
                temperature,
            },
        ) {
            Ok(t) => trajs.push(t),
            Err(e) => {
                set_error(&e.to_string());
                return QsStatus::InvalidArgument;
            }
        }
    }
    match write_jsonl(Path::new(path), &schema, &trajs) {
        Ok(()) => QsStatus::Ok,
        Err(e) => {
            set_error(&e.to_string());
            QsStatus::IoError
        }
    }
}
