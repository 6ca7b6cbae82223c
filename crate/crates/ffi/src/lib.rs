//! C interface to trained neatnet models.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with [`nn_model_free`]. Every fallible call returns an [`NnStatus`] and
//! leaves a message for [`nn_last_error`] on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use neatnet::service::{self, ApiError, InferRequest, PredictRequest, ServiceState};
use neatnet::vae::{Model, VaeError};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    BadModel = 4,
    BadInput = 5,
    UnknownTemplate = 6,
    Mismatch = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A loaded model. Opaque to C.
pub struct NnModel {
    state: ServiceState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: NnStatus, msg: impl Into<String>) -> NnStatus {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> NnStatus) -> NnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(NnStatus::Panic, "internal panic"),
    }
}

fn api_status(e: &ApiError) -> NnStatus {
    match e.status.as_u16() {
        404 => NnStatus::UnknownTemplate,
        409 => NnStatus::Mismatch,
        _ => NnStatus::BadInput,
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, NnStatus> {
    if p.is_null() {
        return Err(fail(NnStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(NnStatus::InvalidUtf8, "string argument is not UTF-8"))
}

unsafe fn model_arg<'a>(m: *const NnModel) -> Result<&'a NnModel, NnStatus> {
    m.as_ref().ok_or_else(|| fail(NnStatus::NullPointer, "null model handle"))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn nn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a model bundle from `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nn_model_load(path: *const c_char, out: *mut *mut NnModel) -> NnStatus {
    guarded(|| {
        if out.is_null() {
            return fail(NnStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        let path = tri!(str_arg(path));
        let model = match Model::load(path) {
            Ok(m) => m,
            Err(VaeError::Bundle(msg)) if msg.starts_with("reading") => return fail(NnStatus::Io, msg),
            Err(e) => return fail(NnStatus::BadModel, e.to_string()),
        };
        let state = match ServiceState::new(model, None, 0) {
            Ok(s) => s,
            Err(e) => return fail(NnStatus::BadModel, e.to_string()),
        };
        *out = Box::into_raw(Box::new(NnModel { state }));
        NnStatus::Ok
    })
}

/// Releases a handle from [`nn_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must come from [`nn_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nn_model_free(model: *mut NnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the preference vector.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nn_model_latent_dim(model: *const NnModel, out: *mut usize) -> NnStatus {
    guarded(|| {
        let m = tri!(model_arg(model));
        if out.is_null() {
            return fail(NnStatus::NullPointer, "null output pointer");
        }
        *out = m.state.model.latent_dim();
        NnStatus::Ok
    })
}

/// Number of objects in template `template_id`.
///
/// # Safety
/// `model` must be a live handle, `template_id` a NUL-terminated string and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nn_model_template_len(
    model: *const NnModel,
    template_id: *const c_char,
    out: *mut usize,
) -> NnStatus {
    guarded(|| {
        let m = tri!(model_arg(model));
        let t = tri!(str_arg(template_id));
        if out.is_null() {
            return fail(NnStatus::NullPointer, "null output pointer");
        }
        match m.state.model.template(t) {
            Ok(t) => {
                *out = t.objects.len();
                NnStatus::Ok
            }
            Err(e) => fail(NnStatus::UnknownTemplate, e.to_string()),
        }
    })
}

/// Infers the posterior from a JSON array of scenes
/// (`[{"template", "objects": [{"name", "position"}]}]`) into `mu` and
/// `logvar`, each of length `dim`.
///
/// # Safety
/// `model` must be a live handle, `scenes_json` a NUL-terminated string and
/// `mu`/`logvar` valid for `dim` writes.
#[no_mangle]
pub unsafe extern "C" fn nn_model_infer(
    model: *const NnModel,
    scenes_json: *const c_char,
    mu: *mut f64,
    logvar: *mut f64,
    dim: usize,
) -> NnStatus {
    guarded(|| {
        let m = tri!(model_arg(model));
        let text = tri!(str_arg(scenes_json));
        if mu.is_null() || logvar.is_null() {
            return fail(NnStatus::NullPointer, "null output buffer");
        }
        let scenes = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return fail(NnStatus::BadInput, format!("malformed scenes: {e}")),
        };
        let reply = match service::infer(&m.state, &InferRequest { scenes }) {
            Ok(r) => r,
            Err(e) => return fail(api_status(&e), e.message),
        };
        if dim < reply.user_mu.len() {
            return fail(
                NnStatus::BufferTooSmall,
                format!("need {} entries, buffer holds {dim}", reply.user_mu.len()),
            );
        }
        ptr::copy_nonoverlapping(reply.user_mu.as_ptr(), mu, reply.user_mu.len());
        ptr::copy_nonoverlapping(reply.user_logvar.as_ptr(), logvar, reply.user_logvar.len());
        NnStatus::Ok
    })
}

/// Decodes template `template_id` for preference vector `mu` (length `dim`) into
/// `positions`, row-major with one row per template object. `*written`
/// receives the number of values stored.
///
/// # Safety
/// `model` must be a live handle, `template_id` a NUL-terminated string, `mu`
/// valid for `dim` reads and `positions` for `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn nn_model_decode(
    model: *const NnModel,
    template_id: *const c_char,
    mu: *const f64,
    dim: usize,
    positions: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> NnStatus {
    guarded(|| {
        let m = tri!(model_arg(model));
        let t = tri!(str_arg(template_id));
        if mu.is_null() || positions.is_null() || written.is_null() {
            return fail(NnStatus::NullPointer, "null buffer");
        }
        *written = 0;
        let req = PredictRequest {
            user_mu: std::slice::from_raw_parts(mu, dim).to_vec(),
            template: t.to_string(),
            mask: None,
        };
        let reply = match service::predict(&m.state, &req) {
            Ok(r) => r,
            Err(e) => return fail(api_status(&e), e.message),
        };
        let flat: Vec<f64> = reply
            .positions
            .iter()
            .flat_map(|o| o.position.clone().unwrap_or_default())
            .collect();
        if capacity < flat.len() {
            return fail(
                NnStatus::BufferTooSmall,
                format!("need {} values, buffer holds {capacity}", flat.len()),
            );
        }
        ptr::copy_nonoverlapping(flat.as_ptr(), positions, flat.len());
        *written = flat.len();
        NnStatus::Ok
    })
}

/// Runs a `/predict` request body and returns the JSON reply in `*out`,
/// to be released with [`nn_string_free`].
///
/// # Safety
/// `model` must be a live handle, `request_json` a NUL-terminated string
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nn_model_predict_json(
    model: *const NnModel,
    request_json: *const c_char,
    out: *mut *mut c_char,
) -> NnStatus {
    guarded(|| {
        let m = tri!(model_arg(model));
        let text = tri!(str_arg(request_json));
        if out.is_null() {
            return fail(NnStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        let req: PredictRequest = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => return fail(NnStatus::BadInput, format!("malformed request: {e}")),
        };
        let reply = match service::predict(&m.state, &req) {
            Ok(r) => r,
            Err(e) => return fail(api_status(&e), e.message),
        };
        let json = serde_json::to_string(&reply).expect("reply serialises");
        *out = CString::new(json).expect("JSON has no NUL").into_raw();
        NnStatus::Ok
    })
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
