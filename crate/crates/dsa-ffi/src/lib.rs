//! C ABI over the pipeline's read-and-evaluate surface.
//!
//! Handles are opaque; every call returns a status code (0 ok, 1 usage,
//! 2 data/format, 3 numerical — matching the CLI's exit codes) and
//! failures leave a message retrievable via `dsa_last_error`. Strings
//! returned to the caller are owned by the caller and must be released
//! with `dsa_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dsa_core::datagen::{read_dataset, Dataset};
use dsa_core::checkpoint::load_checkpoint;
use dsa_core::error::DsaError;
use dsa_core::trainer::evaluate;
use dsa_core::vit::ViTParams;

pub const DSA_OK: i32 = 0;
pub const DSA_ERR_USAGE: i32 = 1;
pub const DSA_ERR_DATA: i32 = 2;
pub const DSA_ERR_NUMERIC: i32 = 3;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(e: DsaError) -> i32 {
    let code = e.exit_code();
    set_error(e.to_string());
    code
}

fn usage(msg: &str) -> i32 {
    set_error(msg.to_string());
    DSA_ERR_USAGE
}

/// Shields the ABI from panics; they surface as numerical errors.
fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic".to_string());
            DSA_ERR_NUMERIC
        }
    }
}

/// # Safety
/// `path` must be a NUL-terminated string valid for the call.
unsafe fn path_arg(path: *const c_char) -> Result<String, i32> {
    if path.is_null() {
        return Err(usage("path is null"));
    }
    match unsafe { CStr::from_ptr(path) }.to_str() {
        Ok(s) => Ok(s.to_string()),
        Err(_) => Err(usage("path is not valid UTF-8")),
    }
}

/// Loaded model checkpoint. Opaque.
pub struct DsaModel {
    params: ViTParams,
}

/// Loaded dataset. Opaque.
pub struct DsaDataset {
    data: Dataset,
}

/// Loads a model checkpoint from `path` into `*out`.
///
/// # Safety
/// `path` points to a NUL-terminated string and `out` to a writable slot.
#[no_mangle]
pub unsafe extern "C" fn dsa_model_load(path: *const c_char, out: *mut *mut DsaModel) -> i32 {
    guarded(|| {
        if out.is_null() {
            return usage("out is null");
        }
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(code) => return code,
        };
        match load_checkpoint(&path) {
            Ok(params) => {
                unsafe { *out = Box::into_raw(Box::new(DsaModel { params })) };
                DSA_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `model` must come from `dsa_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsa_model_free(model: *mut DsaModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Loads a dataset from `path` into `*out`.
///
/// # Safety
/// `path` points to a NUL-terminated string and `out` to a writable slot.
#[no_mangle]
pub unsafe extern "C" fn dsa_dataset_load(path: *const c_char, out: *mut *mut DsaDataset) -> i32 {
    guarded(|| {
        if out.is_null() {
            return usage("out is null");
        }
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(code) => return code,
        };
        match read_dataset(&path) {
            Ok(data) => {
                unsafe { *out = Box::into_raw(Box::new(DsaDataset { data })) };
                DSA_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a dataset handle. Null is a no-op.
///
/// # Safety
/// `dataset` must come from `dsa_dataset_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsa_dataset_free(dataset: *mut DsaDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Number of examples in a dataset; 0 for a null handle.
///
/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dsa_dataset_len(dataset: *const DsaDataset) -> usize {
    if dataset.is_null() {
        return 0;
    }
    unsafe { &*dataset }.data.len()
}

/// Scores `model` on `dataset` and writes the fairness report to `*out`
/// as a JSON string (caller frees with `dsa_string_free`).
///
/// # Safety
/// `model` and `dataset` must be live handles, `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn dsa_eval_json(
    model: *const DsaModel,
    dataset: *const DsaDataset,
    out: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        if model.is_null() || dataset.is_null() || out.is_null() {
            return usage("null handle");
        }
        let (m, d) = unsafe { (&*model, &*dataset) };
        let report = match evaluate(&m.params.cfg.clone(), &m.params, &d.data, 64) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let json = match serde_json::to_string(&report) {
            Ok(j) => j,
            Err(e) => return fail(DsaError::from(e)),
        };
        match CString::new(json) {
            Ok(c) => {
                unsafe { *out = c.into_raw() };
                DSA_OK
            }
            Err(_) => {
                set_error("report contained a NUL byte".to_string());
                DSA_ERR_NUMERIC
            }
        }
    })
}

/// Last error message on this thread, or null if none. Caller frees the
/// string with `dsa_string_free`.
#[no_mangle]
pub extern "C" fn dsa_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        Some(c) => c.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Library version as a static string. Do not free.
#[no_mangle]
pub extern "C" fn dsa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn dsa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
