//! C ABI over `twin-core`.
//!
//! Handles are opaque. Every fallible call returns a [`TwinStatus`]; on
//! failure `twin_last_error_message` describes the error on the calling
//! thread. Structured data crosses the boundary as UTF-8 JSON, in the same
//! shapes the HTTP API uses. Strings returned through out-parameters belong to
//! the caller and must be released with `twin_string_free`.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use serde::Deserialize;
use twin_core::engine::{attribute_report, EngineError, WhatIfQuery};
use twin_core::registry::RegistryError;
use twin_core::{build_graph, ingest, load_registry, what_if, ExternalEvent, Registry, TwinState};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwinStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    MalformedJson = 3,
    InvalidRegistry = 4,
    UnknownAttribute = 5,
    UnknownModel = 6,
    InvalidValue = 7,
    Internal = 99,
}

/// A validated, immutable registry. May be shared by many twins.
pub struct TwinRegistry {
    inner: Arc<Registry>,
}

/// One patient's twin.
pub struct TwinHandle {
    inner: TwinState,
}

type Failure = (TwinStatus, String);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TwinStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TwinStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_last_error(&message);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal error: {msg}"));
            TwinStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((TwinStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|e| (TwinStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| (TwinStatus::NullArgument, format!("{name} is null")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| (TwinStatus::NullArgument, format!("{name} is null")))
}

fn json_arg<T: for<'de> Deserialize<'de>>(s: &str, name: &str) -> Result<T, Failure> {
    serde_json::from_str(s).map_err(|e| (TwinStatus::MalformedJson, format!("{name}: {e}")))
}

unsafe fn write_json<T: serde::Serialize>(out: *mut *mut c_char, value: &T) -> Result<(), Failure> {
    let s = serde_json::to_string(value).map_err(|e| (TwinStatus::Internal, e.to_string()))?;
    write_string(out, s)
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err((TwinStatus::NullArgument, "out is null".into()));
    }
    let c = CString::new(s).map_err(|e| (TwinStatus::Internal, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

fn registry_failure(e: RegistryError) -> Failure {
    let status = match e {
        RegistryError::UnknownAttribute(_) => TwinStatus::UnknownAttribute,
        RegistryError::UnknownModel(_) => TwinStatus::UnknownModel,
        _ => TwinStatus::InvalidRegistry,
    };
    (status, e.to_string())
}

fn engine_failure(e: EngineError) -> Failure {
    match e {
        EngineError::Registry(r) => registry_failure(r),
        e @ EngineError::InvalidValue { .. } => (TwinStatus::InvalidValue, e.to_string()),
    }
}

/// Library version, a static nul-terminated string.
#[no_mangle]
pub extern "C" fn twin_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn twin_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn twin_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a registry document.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn twin_registry_load_json(json: *const c_char, out: *mut *mut TwinRegistry) -> TwinStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        let out = mut_arg(out, "out")?;
        let registry = load_registry(json).map_err(|e| (TwinStatus::InvalidRegistry, e.to_string()))?;
        *out = Box::into_raw(Box::new(TwinRegistry { inner: Arc::new(registry) }));
        Ok(())
    })
}

/// # Safety
/// `registry` must be null or a handle from `twin_registry_load_json`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn twin_registry_free(registry: *mut TwinRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// # Safety
/// `registry` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn twin_registry_version(registry: *const TwinRegistry) -> u64 {
    registry.as_ref().map_or(0, |r| r.inner.version())
}

/// Builds an empty twin. The twin keeps its own reference to the registry, so
/// the registry handle may be freed afterwards.
///
/// # Safety
/// `registry` must be a live handle, `patient_id` a nul-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn twin_create(
    registry: *const TwinRegistry,
    patient_id: *const c_char,
    out: *mut *mut TwinHandle,
) -> TwinStatus {
    guard(|| {
        let registry = ref_arg(registry, "registry")?;
        let patient = str_arg(patient_id, "patient_id")?;
        let out = mut_arg(out, "out")?;
        let twin = build_graph(registry.inner.clone(), patient, &BTreeSet::new()).map_err(registry_failure)?;
        *out = Box::into_raw(Box::new(TwinHandle { inner: twin }));
        Ok(())
    })
}

/// # Safety
/// `twin` must be null or a handle from `twin_create`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn twin_free(twin: *mut TwinHandle) {
    if !twin.is_null() {
        drop(Box::from_raw(twin));
    }
}

/// Ingests one observation `{"attribute", "value", "timestamp", "source"}`
/// and writes the run report. On failure the twin is unchanged.
///
/// # Safety
/// Pointers must be live; `out_report` receives a string to free with
/// `twin_string_free`.
#[no_mangle]
pub unsafe extern "C" fn twin_ingest_json(
    twin: *mut TwinHandle,
    event_json: *const c_char,
    out_report: *mut *mut c_char,
) -> TwinStatus {
    guard(|| {
        let twin = mut_arg(twin, "twin")?;
        let event: ExternalEvent = json_arg(str_arg(event_json, "event_json")?, "event_json")?;
        if out_report.is_null() {
            return Err((TwinStatus::NullArgument, "out_report is null".into()));
        }
        let report = ingest(&mut twin.inner, event).map_err(engine_failure)?;
        write_json(out_report, &report)
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WhatIfRequest {
    #[serde(default)]
    overrides: Vec<ExternalEvent>,
    #[serde(default)]
    query: Option<WhatIfQuery>,
}

/// Runs `{"overrides": [...], "query": {...}}` on a scratch copy and writes
/// `{"snapshot", "report"}`. The twin is never modified.
///
/// # Safety
/// Pointers must be live; `out` receives a string to free with `twin_string_free`.
#[no_mangle]
pub unsafe extern "C" fn twin_what_if_json(
    twin: *const TwinHandle,
    request_json: *const c_char,
    out: *mut *mut c_char,
) -> TwinStatus {
    guard(|| {
        let twin = ref_arg(twin, "twin")?;
        let req: WhatIfRequest = json_arg(str_arg(request_json, "request_json")?, "request_json")?;
        let (snapshot, report) = what_if(&twin.inner, req.overrides, req.query.as_ref()).map_err(engine_failure)?;
        write_json(out, &serde_json::json!({"snapshot": snapshot, "report": report}))
    })
}

/// # Safety
/// Pointers must be live; `out` receives a string to free with `twin_string_free`.
#[no_mangle]
pub unsafe extern "C" fn twin_attribute_report_json(
    twin: *const TwinHandle,
    attribute: *const c_char,
    out: *mut *mut c_char,
) -> TwinStatus {
    guard(|| {
        let twin = ref_arg(twin, "twin")?;
        let attr = str_arg(attribute, "attribute")?;
        let report = attribute_report(&twin.inner, attr).map_err(engine_failure)?;
        write_json(out, &report)
    })
}

/// # Safety
/// Pointers must be live; `out` receives a string to free with `twin_string_free`.
#[no_mangle]
pub unsafe extern "C" fn twin_snapshot_json(twin: *const TwinHandle, out: *mut *mut c_char) -> TwinStatus {
    guard(|| {
        let twin = ref_arg(twin, "twin")?;
        write_json(out, &twin.inner.snapshot())
    })
}

/// Canonical serialized state, byte-stable across identical histories.
///
/// # Safety
/// Pointers must be live; `out` receives a string to free with `twin_string_free`.
#[no_mangle]
pub unsafe extern "C" fn twin_state_json(twin: *const TwinHandle, out: *mut *mut c_char) -> TwinStatus {
    guard(|| {
        let twin = ref_arg(twin, "twin")?;
        write_string(out, twin.inner.state_json())
    })
}

/// # Safety
/// `twin` must be live and `model` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn twin_set_model_enabled(twin: *mut TwinHandle, model: *const c_char, enabled: bool) -> TwinStatus {
    guard(|| {
        let twin = mut_arg(twin, "twin")?;
        let model = str_arg(model, "model")?;
        twin.inner.set_model_enabled(model, enabled).map_err(registry_failure)
    })
}
