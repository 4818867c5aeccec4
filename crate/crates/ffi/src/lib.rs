//! C interface to the dialogue toolkit.
//!
//! Every function returns a [`DgStatus`]. Outputs go through pointer
//! arguments. Strings handed out must be released with [`dg_string_free`],
//! handles with their matching `*_free` function. After a failure,
//! [`dg_last_error`] describes it on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use dialogen::backend::{BackendSession, EntityStore};
use dialogen::dataset::{compute_stats, read_dataset};
use dialogen::dsl::{canonicalize, parse_command, parse_commands};
use dialogen::eval::{evaluate, read_predictions};
use dialogen::schema::{read_catalog, SchemaCatalog};
use dialogen::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Syntax = 3,
    Io = 4,
    Schema = 5,
    UnknownIntent = 6,
    UnknownVariable = 7,
    InvalidTransition = 8,
    TypeMismatch = 9,
    Alignment = 10,
    Config = 11,
    Other = 12,
    Panic = 13,
}

impl From<&Error> for DgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Syntax { .. } | Error::DanglingVarRef(_) => DgStatus::Syntax,
            Error::Io(_) => DgStatus::Io,
            Error::Schema { .. } | Error::Parse(_) => DgStatus::Schema,
            Error::UnknownIntent(_) => DgStatus::UnknownIntent,
            Error::UnknownVariable(_) => DgStatus::UnknownVariable,
            Error::InvalidTransition(_) => DgStatus::InvalidTransition,
            Error::TypeMismatch(_) => DgStatus::TypeMismatch,
            Error::Alignment(_) => DgStatus::Alignment,
            Error::Config(_) => DgStatus::Config,
            _ => DgStatus::Other,
        }
    }
}

/// A loaded intent catalog.
pub struct DgCatalog {
    inner: Arc<SchemaCatalog>,
}

/// A mock back-end session bound to a catalog.
pub struct DgBackend {
    inner: BackendSession,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DgStatus, msg: impl Into<String>) -> DgStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> DgStatus {
    let status = DgStatus::from(&e);
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> DgStatus) -> DgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(DgStatus::Panic, "internal panic"),
    }
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, DgStatus> {
    if p.is_null() {
        return Err(fail(DgStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DgStatus::InvalidUtf8, "argument is not UTF-8"))
}

unsafe fn give_string(out: *mut *mut c_char, s: String) -> DgStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            DgStatus::Ok
        }
        Err(_) => fail(DgStatus::Other, "output contains a nul byte"),
    }
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! require_out {
    ($p:expr) => {
        if $p.is_null() {
            return fail(DgStatus::NullArgument, "null output pointer");
        }
    };
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn dg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a catalog from a JSON-lines file.
///
/// # Safety
/// `path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_catalog_open(path: *const c_char, out: *mut *mut DgCatalog) -> DgStatus {
    guard(|| {
        require_out!(out);
        let path = try_ffi!(text(path));
        match read_catalog(Path::new(path)) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(DgCatalog { inner: Arc::new(c) }));
                DgStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `catalog` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_catalog_intent_count(catalog: *const DgCatalog, out: *mut usize) -> DgStatus {
    guard(|| {
        require_out!(out);
        let Some(c) = catalog.as_ref() else {
            return fail(DgStatus::NullArgument, "null catalog");
        };
        *out = c.inner.intents.len();
        DgStatus::Ok
    })
}

/// # Safety
/// `catalog` must come from [`dg_catalog_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dg_catalog_free(catalog: *mut DgCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// Creates an empty back-end session. The catalog may be freed afterwards.
///
/// # Safety
/// `catalog` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_backend_new(catalog: *const DgCatalog, out: *mut *mut DgBackend) -> DgStatus {
    guard(|| {
        require_out!(out);
        let Some(c) = catalog.as_ref() else {
            return fail(DgStatus::NullArgument, "null catalog");
        };
        let inner = BackendSession::new(c.inner.clone(), EntityStore::default());
        *out = Box::into_raw(Box::new(DgBackend { inner }));
        DgStatus::Ok
    })
}

/// Applies one command line. `*signal` receives the signal text, or null
/// when the command has no back-end effect.
///
/// # Safety
/// `backend` must be a live handle, `command` a valid C string and
/// `signal` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_backend_apply(
    backend: *mut DgBackend,
    command: *const c_char,
    signal: *mut *mut c_char,
) -> DgStatus {
    guard(|| {
        require_out!(signal);
        *signal = ptr::null_mut();
        let Some(b) = backend.as_mut() else {
            return fail(DgStatus::NullArgument, "null backend");
        };
        let cmd = match parse_command(try_ffi!(text(command))) {
            Ok(c) => c,
            Err(e) => return from_error(e),
        };
        match b.inner.apply_command(&cmd) {
            Ok(Some(s)) => give_string(signal, s.to_string()),
            Ok(None) => DgStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `backend` must come from [`dg_backend_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dg_backend_free(backend: *mut DgBackend) {
    if !backend.is_null() {
        drop(Box::from_raw(backend));
    }
}

/// Canonical form of a newline-separated command block.
///
/// # Safety
/// `commands` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_canonicalize(commands: *const c_char, out: *mut *mut c_char) -> DgStatus {
    guard(|| {
        require_out!(out);
        let parsed = parse_commands(try_ffi!(text(commands))).and_then(|c| canonicalize(&c));
        match parsed {
            Ok(c) => give_string(out, c.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")),
            Err(e) => from_error(e),
        }
    })
}

/// Dataset statistics as JSON.
///
/// # Safety
/// `dataset_path` must be a valid C string, `catalog` a live handle and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_stats_json(
    dataset_path: *const c_char,
    catalog: *const DgCatalog,
    out: *mut *mut c_char,
) -> DgStatus {
    guard(|| {
        require_out!(out);
        let Some(c) = catalog.as_ref() else {
            return fail(DgStatus::NullArgument, "null catalog");
        };
        let records = match read_dataset(Path::new(try_ffi!(text(dataset_path)))) {
            Ok(r) => r,
            Err(e) => return from_error(e),
        };
        let stats = compute_stats(&records, &c.inner);
        give_string(out, serde_json::to_string(&stats).expect("stats serialize"))
    })
}

/// Scores a prediction file against a gold dataset; the report is JSON.
///
/// # Safety
/// Both paths must be valid C strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_evaluate_json(
    gold_path: *const c_char,
    predictions_path: *const c_char,
    out: *mut *mut c_char,
) -> DgStatus {
    guard(|| {
        require_out!(out);
        let gold = try_ffi!(text(gold_path));
        let preds = try_ffi!(text(predictions_path));
        let report = read_dataset(Path::new(gold))
            .and_then(|g| Ok((g, read_predictions(Path::new(preds))?)))
            .and_then(|(g, p)| evaluate(&g, &p));
        match report {
            Ok(r) => give_string(out, serde_json::to_string(&r).expect("report serializes")),
            Err(e) => from_error(e),
        }
    })
}
