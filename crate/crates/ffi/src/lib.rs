//! C ABI over the QA pipeline.
//!
//! Conventions: every fallible call returns an [`EvqaStatus`]; output
//! values come back through out-pointers that are written only on
//! `EVQA_OK`. Strings returned by the library are heap-allocated and must
//! be released with [`evqa_string_free`]; models with [`evqa_model_free`].
//! The most recent error message of the current thread is available via
//! [`evqa_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::str::FromStr;

use evqa::corpus::{MultiHopExample, Vocabulary};
use evqa::inference::{predict, InferenceMode};
use evqa::model::{load_checkpoint, LoadedModel, QaModel};
use evqa::Error;

/// Call outcome. Nonzero values mirror the CLI exit codes, with dedicated
/// codes for null arguments and invalid UTF-8.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvqaStatus {
    EvqaOk = 0,
    EvqaErrUsage = 1,
    EvqaErrData = 2,
    EvqaErrRuntime = 3,
    EvqaErrNullArgument = 4,
    EvqaErrInvalidUtf8 = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).expect("sanitized message has no NUL");
    });
}

fn status_of(err: &Error) -> EvqaStatus {
    match err.exit_code() {
        1 => EvqaStatus::EvqaErrUsage,
        2 => EvqaStatus::EvqaErrData,
        _ => EvqaStatus::EvqaErrRuntime,
    }
}

fn fail(err: &Error) -> EvqaStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Guards the boundary: a panic inside `f` becomes a runtime status, not
/// an unwind across the ABI.
fn guarded(f: impl FnOnce() -> EvqaStatus) -> EvqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            EvqaStatus::EvqaErrRuntime
        }
    }
}

/// Reads a required C string argument.
///
/// # Safety
/// `p` must be null or a NUL-terminated string valid for the call.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, EvqaStatus> {
    if p.is_null() {
        set_error(&format!("{what} is null"));
        return Err(EvqaStatus::EvqaErrNullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        EvqaStatus::EvqaErrInvalidUtf8
    })
}

/// A loaded reader checkpoint: the model plus its embedded vocabulary.
pub struct EvqaModel {
    model: QaModel,
    vocab: Vocabulary,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn evqa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Most recent error message on this thread; empty when no call failed.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn evqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Word-level answer F1 between two UTF-8 strings.
///
/// # Safety
/// `pred` and `gold` must be NUL-terminated strings; `out` must point to
/// a writable f64.
#[no_mangle]
pub unsafe extern "C" fn evqa_qa_f1(
    pred: *const c_char,
    gold: *const c_char,
    out: *mut f64,
) -> EvqaStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is null");
            return EvqaStatus::EvqaErrNullArgument;
        }
        let pred = match read_str(pred, "pred") {
            Ok(s) => s,
            Err(st) => return st,
        };
        let gold = match read_str(gold, "gold") {
            Ok(s) => s,
            Err(st) => return st,
        };
        out.write(evqa::evaluation::qa_f1(pred, gold));
        EvqaStatus::EvqaOk
    })
}

/// Loads a reader checkpoint. On success `*out` owns the model.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to a writable
/// pointer slot.
#[no_mangle]
pub unsafe extern "C" fn evqa_model_load(
    path: *const c_char,
    out: *mut *mut EvqaModel,
) -> EvqaStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is null");
            return EvqaStatus::EvqaErrNullArgument;
        }
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(st) => return st,
        };
        match load_checkpoint(Path::new(path)) {
            Ok(LoadedModel::Qa(model, vocab)) => {
                let boxed = Box::new(EvqaModel { model: *model, vocab });
                out.write(Box::into_raw(boxed));
                EvqaStatus::EvqaOk
            }
            Ok(LoadedModel::Selector(..)) => {
                fail(&Error::Usage(format!("{path} is a selector checkpoint, expected a reader")))
            }
            Err(e) => fail(&e),
        }
    })
}

/// Runs one prediction. `example_json` is a single example in the corpus
/// schema; `mode` is `single_paragraph` or `paired_paragraph`
/// (`selected_evidences` needs a selector and is not exposed here). On
/// success `*out` is a heap JSON prediction record; free it with
/// [`evqa_string_free`].
///
/// # Safety
/// `model` must come from [`evqa_model_load`] and be unreleased;
/// `example_json` and `mode` must be NUL-terminated strings; `out` must
/// point to a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn evqa_model_predict_json(
    model: *const EvqaModel,
    example_json: *const c_char,
    mode: *const c_char,
    out: *mut *mut c_char,
) -> EvqaStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            set_error("model or out is null");
            return EvqaStatus::EvqaErrNullArgument;
        }
        let raw = match read_str(example_json, "example_json") {
            Ok(s) => s,
            Err(st) => return st,
        };
        let mode_str = match read_str(mode, "mode") {
            Ok(s) => s,
            Err(st) => return st,
        };
        let mode = match InferenceMode::from_str(mode_str) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        if mode == InferenceMode::SelectedEvidences {
            return fail(&Error::Usage(
                "selected_evidences mode is not available over the C ABI".into(),
            ));
        }
        let ex: MultiHopExample = match serde_json::from_str(raw) {
            Ok(ex) => ex,
            Err(e) => {
                set_error(&format!("example_json: {e}"));
                return EvqaStatus::EvqaErrData;
            }
        };
        if let Err(e) = ex.validate() {
            return fail(&e);
        }
        let handle = &*model;
        let budget = handle.model.cfg.max_len;
        let record = match predict(&handle.model, None, &ex, mode, &handle.vocab, budget, 30, 5) {
            Ok(r) => r,
            Err(e) => return fail(&e),
        };
        let body = match serde_json::to_string(&record) {
            Ok(b) => b,
            Err(e) => {
                set_error(&format!("encode prediction: {e}"));
                return EvqaStatus::EvqaErrRuntime;
            }
        };
        match CString::new(body) {
            Ok(c) => {
                out.write(c.into_raw());
                EvqaStatus::EvqaOk
            }
            Err(_) => {
                set_error("prediction contained a NUL byte");
                EvqaStatus::EvqaErrRuntime
            }
        }
    })
}

/// Releases a model returned by [`evqa_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must be null or an unreleased pointer from
/// [`evqa_model_load`].
#[no_mangle]
pub unsafe extern "C" fn evqa_model_free(model: *mut EvqaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be null or an unreleased string pointer returned by this
/// library.
#[no_mangle]
pub unsafe extern "C" fn evqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

const _: () = {
    // The status codes are part of the ABI; the nonzero ones equal the
    // CLI exit codes documented in the core crate.
    assert!(EvqaStatus::EvqaOk as i32 == 0);
    assert!(EvqaStatus::EvqaErrUsage as i32 == 1);
    assert!(EvqaStatus::EvqaErrData as i32 == 2);
    assert!(EvqaStatus::EvqaErrRuntime as i32 == 3);
};
