//! C ABI for the fedlora simulator.
//!
//! Every function returns an [`FlStatus`]; on failure a description is kept
//! per thread and can be read with [`fl_last_error`]. Parameter containers
//! cross the boundary as opaque [`FlParams`] handles owned by the caller and
//! released with [`fl_params_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fedlora::experiment::{self, ExperimentConfig};
use fedlora::federated::{ledger_predict, Strategy};
use fedlora::merge;
use fedlora::params::{self, ParamVector};
use fedlora::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    ShapeMismatch = 4,
    Invariant = 5,
    Io = 6,
    Format = 7,
    OutOfRange = 8,
    Panic = 9,
}

/// Upload strategy selector for [`fl_ledger_predict`].
pub const FL_STRATEGY_FEDIT: u32 = 0;
pub const FL_STRATEGY_FEDSA: u32 = 1;
pub const FL_STRATEGY_FFA_LORA: u32 = 2;
pub const FL_STRATEGY_LOCAL: u32 = 3;

/// Opaque parameter container.
pub struct FlParams(ParamVector);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FlStatus {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Data(_) => FlStatus::Config,
        Error::InvalidArgument(_) | Error::Empty(_) => FlStatus::InvalidArgument,
        Error::ShapeMismatch { .. } => FlStatus::ShapeMismatch,
        Error::Invariant(_) => FlStatus::Invariant,
        Error::Io(_) => FlStatus::Io,
        Error::Format(_) | Error::Checksum { .. } => FlStatus::Format,
    }
}

struct Failure(FlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FlStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any error or panic and converts it to a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FlStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(FlStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn params_arg<'a>(p: *const FlParams, what: &str) -> Result<&'a ParamVector, Failure> {
    p.as_ref().map(|h| &h.0).ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a `.pvec` file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_params_load(path: *const c_char, out: *mut *mut FlParams) -> FlStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let v = params::read_pvec(path)?;
        *out = Box::into_raw(Box::new(FlParams(v)));
        Ok(())
    })
}

/// Writes the container to a `.pvec` file.
///
/// # Safety
/// `params` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fl_params_save(params: *const FlParams, path: *const c_char) -> FlStatus {
    guard(|| {
        let v = params_arg(params, "params")?;
        let path = path_arg(path, "path")?;
        params::write_pvec(path, v)?;
        Ok(())
    })
}

/// Total number of scalars across all blocks; 0 for a null handle.
///
/// # Safety
/// `params` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn fl_params_len(params: *const FlParams) -> usize {
    params.as_ref().map_or(0, |h| h.0.len())
}

/// Number of named blocks; 0 for a null handle.
///
/// # Safety
/// `params` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn fl_params_num_blocks(params: *const FlParams) -> usize {
    params.as_ref().map_or(0, |h| h.0.num_blocks())
}

/// Scalar `index` of the flattened container.
///
/// # Safety
/// `params` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_params_get(params: *const FlParams, index: usize, out: *mut f64) -> FlStatus {
    guard(|| {
        let v = params_arg(params, "params")?;
        let out = out_arg(out, "out")?;
        *out = v.iter().nth(index).ok_or_else(|| {
            Failure(
                FlStatus::OutOfRange,
                format!("index {index} out of range for {} values", v.len()),
            )
        })?;
        Ok(())
    })
}

/// Copies the flattened values into `buf`, which must hold exactly
/// `fl_params_len(params)` doubles.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fl_params_copy(params: *const FlParams, buf: *mut f64, len: usize) -> FlStatus {
    guard(|| {
        let v = params_arg(params, "params")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len != v.len() {
            return Err(Failure(
                FlStatus::OutOfRange,
                format!("buffer holds {len} values, container has {}", v.len()),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, s) in dst.iter_mut().zip(v.iter()) {
            *d = s;
        }
        Ok(())
    })
}

/// Inner product of two containers with the same layout.
///
/// # Safety
/// Both handles must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_params_dot(x: *const FlParams, y: *const FlParams, out: *mut f64) -> FlStatus {
    guard(|| {
        let (x, y) = (params_arg(x, "x")?, params_arg(y, "y")?);
        *out_arg(out, "out")? = params::dot(x, y)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `params` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fl_params_free(params: *mut FlParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Trace-optimal mixing weights for traces `a` (federated), `b` (local) and
/// cross trace `c`. Writes both weights; they sum to 1.
///
/// # Safety
/// Output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fl_optimal_weights(
    a: f64,
    b: f64,
    c: f64,
    lambda_fedit: *mut f64,
    lambda_local: *mut f64,
) -> FlStatus {
    guard(|| {
        let lf = out_arg(lambda_fedit, "lambda_fedit")?;
        let ll = out_arg(lambda_local, "lambda_local")?;
        let w = merge::optimal_weights(a, b, c)?;
        *lf = w.lambda_fedit;
        *ll = w.lambda_local;
        Ok(())
    })
}

/// Predicted upload bytes for one adapted `m × n` layer at rank `r`.
///
/// # Safety
/// Output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fl_ledger_predict(
    strategy: u32,
    r: u64,
    m: u64,
    n: u64,
    rounds: u64,
    n_clients: u64,
    per_client_upload: *mut u64,
    total_upload: *mut u64,
) -> FlStatus {
    guard(|| {
        let strategy = match strategy {
            FL_STRATEGY_FEDIT => Strategy::FedIt,
            FL_STRATEGY_FEDSA => Strategy::FedSa,
            FL_STRATEGY_FFA_LORA => Strategy::FfaLora,
            FL_STRATEGY_LOCAL => Strategy::LocalOnly,
            other => return Err(Failure(FlStatus::InvalidArgument, format!("unknown strategy {other}"))),
        };
        let per = out_arg(per_client_upload, "per_client_upload")?;
        let total = out_arg(total_upload, "total_upload")?;
        let p = ledger_predict(strategy, r, m, n, rounds, n_clients);
        *per = p.per_client_upload;
        *total = p.total_upload;
        Ok(())
    })
}

/// Runs the experiment described by a JSON config file. `out_dir` may be
/// null to keep the config's output directory.
///
/// # Safety
/// `config_path` must be NUL-terminated; `out_dir` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fl_run_experiment(config_path: *const c_char, out_dir: *const c_char) -> FlStatus {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        let mut cfg = ExperimentConfig::load(&path).map_err(|e| match e {
            Error::Io(io) => Failure(FlStatus::Config, format!("{}: {io}", path.display())),
            other => other.into(),
        })?;
        if !out_dir.is_null() {
            cfg.output_dir = path_arg(out_dir, "out_dir")?;
        }
        experiment::run_experiment(&cfg)?;
        Ok(())
    })
}
