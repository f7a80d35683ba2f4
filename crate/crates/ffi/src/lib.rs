//! C ABI over a trained arcslot checkpoint.
//!
//! Every fallible call returns an [`ArcslotStatus`]; the message of the most
//! recent failure on the calling thread is available from
//! [`arcslot_last_error_message`]. Models are opaque handles owned by the
//! caller and released with [`arcslot_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use arcslot::data::{Example, Kind};
use arcslot::eval::{non_strict_em, token_f1};
use arcslot::model::{ArcModel, Completed, Variant};
use arcslot::template::{QA_TEMPLATE, RECONSTRUCTION_TEMPLATES};
use arcslot::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArcslotStatus {
    Ok = 0,
    NullArg = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    Dimension = 5,
    Vocabulary = 6,
    Template = 7,
    Segmentation = 8,
    Capacity = 9,
    Contract = 10,
    Pipeline = 11,
    Config = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

/// Opaque model handle.
pub struct ArcslotModel {
    inner: ArcModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> ArcslotStatus {
    match e {
        Error::Dimension { .. } => ArcslotStatus::Dimension,
        Error::Vocabulary(_) => ArcslotStatus::Vocabulary,
        Error::Contract(_) => ArcslotStatus::Contract,
        Error::Template(_) => ArcslotStatus::Template,
        Error::Segmentation(_) => ArcslotStatus::Segmentation,
        Error::Capacity { .. } => ArcslotStatus::Capacity,
        Error::Pipeline(_) => ArcslotStatus::Pipeline,
        Error::Checkpoint(_) => ArcslotStatus::Checkpoint,
        Error::Config(_) => ArcslotStatus::Config,
        Error::Io(_) => ArcslotStatus::Io,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (ArcslotStatus, String)>) -> ArcslotStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ArcslotStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ArcslotStatus::Panic
        }
    }
}

fn lift(e: Error) -> (ArcslotStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (ArcslotStatus, String)> {
    if p.is_null() {
        return Err((ArcslotStatus::NullArg, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (ArcslotStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Segments are separated by `;`, tokens by whitespace. An empty question
/// selects reconstruction, anything else a QA lookup.
fn build_example(model: &ArcModel, segments: &str, question: &str) -> Result<Example, Error> {
    let segs = segments
        .split(';')
        .map(|s| model.vocab.encode(s))
        .collect::<Result<Vec<_>, _>>()?;
    let question = model.vocab.encode(question)?;
    let (kind, template) = if question.is_empty() {
        (Kind::Reconstruction, RECONSTRUCTION_TEMPLATES[0])
    } else {
        (Kind::Qa, QA_TEMPLATE)
    };
    Ok(Example {
        kind,
        segments: segs,
        question,
        target: Vec::new(),
        template: template.to_string(),
        two_hop: false,
    })
}

unsafe fn model_ref<'a>(m: *const ArcslotModel) -> Result<&'a ArcModel, (ArcslotStatus, String)> {
    m.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| (ArcslotStatus::NullArg, "model is null".to_string()))
}

/// Loads a checkpoint into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn arcslot_model_load(path: *const c_char, out: *mut *mut ArcslotModel) -> ArcslotStatus {
    guard(|| {
        if out.is_null() {
            return Err((ArcslotStatus::NullArg, "out is null".into()));
        }
        *out = ptr::null_mut();
        let path = text(path, "path")?;
        let inner = ArcModel::load(Path::new(path)).map_err(lift)?;
        *out = Box::into_raw(Box::new(ArcslotModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`arcslot_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn arcslot_model_free(model: *mut ArcslotModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Last completed training phase: -1 none, 0 backbone, 1..3 stages.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn arcslot_model_stage(model: *const ArcslotModel, out: *mut c_int) -> ArcslotStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err((ArcslotStatus::NullArg, "out is null".into()));
        }
        *out = match m.completed {
            None => -1,
            Some(Completed::Base) => 0,
            Some(Completed::Stage1) => 1,
            Some(Completed::Stage2) => 2,
            Some(Completed::Stage3) => 3,
        };
        Ok(())
    })
}

/// Greedy decoding from compressed slots into `buf` as NUL-terminated text.
/// `written` receives the length without the terminator; on
/// `BufferTooSmall` it receives the length that would have been needed.
///
/// # Safety
/// String arguments must be NUL-terminated; `buf` must hold `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn arcslot_generate(
    model: *const ArcslotModel,
    segments: *const c_char,
    question: *const c_char,
    use_gates: bool,
    max_new_tokens: usize,
    buf: *mut c_char,
    buf_len: usize,
    written: *mut usize,
) -> ArcslotStatus {
    guard(|| {
        let m = model_ref(model)?;
        let segs = text(segments, "segments")?;
        let q = text(question, "question")?;
        if buf.is_null() || written.is_null() {
            return Err((ArcslotStatus::NullArg, "buf or written is null".into()));
        }
        let ex = build_example(m, segs, q).map_err(lift)?;
        let (ids, _) = m
            .generate(&ex, Variant::Slots { gating: use_gates }, max_new_tokens)
            .map_err(lift)?;
        let s = m.vocab.decode(&ids).map_err(lift)?;
        *written = s.len();
        if s.len() + 1 > buf_len {
            return Err((
                ArcslotStatus::BufferTooSmall,
                format!("need {} bytes, have {buf_len}", s.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
        *buf.add(s.len()) = 0;
        Ok(())
    })
}

/// Gate trajectories of one inference forward, one `layer=` line per gated
/// layer. The string is owned by the caller; release it with
/// [`arcslot_string_free`].
///
/// # Safety
/// String arguments must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn arcslot_trace_gates(
    model: *const ArcslotModel,
    segments: *const c_char,
    question: *const c_char,
    out: *mut *mut c_char,
) -> ArcslotStatus {
    guard(|| {
        if out.is_null() {
            return Err((ArcslotStatus::NullArg, "out is null".into()));
        }
        *out = ptr::null_mut();
        let m = model_ref(model)?;
        let ex = build_example(m, text(segments, "segments")?, text(question, "question")?).map_err(lift)?;
        let (_, trace) = m.generate(&ex, Variant::Slots { gating: true }, 1).map_err(lift)?;
        let s = CString::new(trace.to_string()).map_err(|_| (ArcslotStatus::Contract, "NUL in trace".into()))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn arcslot_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Non-strict exact match (0 or 1) into `*out`.
///
/// # Safety
/// Strings must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn arcslot_non_strict_em(
    prediction: *const c_char,
    gold: *const c_char,
    out: *mut f64,
) -> ArcslotStatus {
    guard(|| {
        let p = text(prediction, "prediction")?;
        let g = text(gold, "gold")?;
        if out.is_null() {
            return Err((ArcslotStatus::NullArg, "out is null".into()));
        }
        *out = non_strict_em(p, g);
        Ok(())
    })
}

/// Token-level F1 into `*out`.
///
/// # Safety
/// Strings must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn arcslot_token_f1(
    prediction: *const c_char,
    gold: *const c_char,
    out: *mut f64,
) -> ArcslotStatus {
    guard(|| {
        let p = text(prediction, "prediction")?;
        let g = text(gold, "gold")?;
        if out.is_null() {
            return Err((ArcslotStatus::NullArg, "out is null".into()));
        }
        *out = token_f1(p, g);
        Ok(())
    })
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn arcslot_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}
