//! C ABI over the workbench: load a checkpoint, translate under a domain
//! label, score BLEU and compute cross-label standard deviations.
//!
//! Every function returns an [`MdmtStatus`]. On failure the calling thread's
//! message is available from [`mdmt_last_error_message`]. Strings returned
//! through out-pointers are owned by the caller and released with
//! [`mdmt_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mdmt::data::Vocabulary;
use mdmt::eval::{corpus_bleu, robustness_std};
use mdmt::model::{Checkpoint, DecodeConfig, Strategy};
use mdmt::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    UnknownLabel = 5,
    InvalidArgument = 6,
    Panic = 7,
}

/// Opaque handle: a checkpoint and the vocabulary it was trained with.
pub struct MdmtModel {
    checkpoint: Checkpoint,
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MdmtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => MdmtStatus::Io,
            Error::Format { .. } | Error::Json(_) | Error::FingerprintMismatch { .. } => MdmtStatus::Format,
            Error::UnknownLabel(_) => MdmtStatus::UnknownLabel,
            _ => MdmtStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MdmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdmtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MdmtStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MdmtStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MdmtStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn str_array<'a>(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<&'a str>, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    (0..n).map(|i| str_arg(*p.add(i), what)).collect()
}

/// Loads a checkpoint and its vocabulary file. The vocabulary must be the
/// one the checkpoint was trained with.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdmt_model_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut MdmtModel,
) -> MdmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = str_arg(checkpoint_path, "checkpoint_path")?;
        let vocab = Vocabulary::load(Path::new(str_arg(vocab_path, "vocab_path")?))?;
        let checkpoint = Checkpoint::load_for(Path::new(ckpt), &vocab)?;
        *out = Box::into_raw(Box::new(MdmtModel { checkpoint, vocab }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`mdmt_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mdmt_model_free(model: *mut MdmtModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Number of domain labels the model's vocabulary knows.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdmt_model_num_domains(model: *const MdmtModel, out: *mut usize) -> MdmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.vocab.num_domains();
        Ok(())
    })
}

/// Translates one whitespace-tokenized sentence. `domain` may be null for
/// no label. `beam` of 0 or 1 decodes greedily. The result is written to
/// `*out` and must be freed with [`mdmt_string_free`].
///
/// # Safety
/// `model` must be a live handle; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdmt_model_translate(
    model: *const MdmtModel,
    source: *const c_char,
    domain: *const c_char,
    beam: usize,
    out: *mut *mut c_char,
) -> MdmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let src = str_arg(source, "source")?;
        let label = if domain.is_null() {
            None
        } else {
            let d = str_arg(domain, "domain")?;
            Some(
                m.vocab
                    .domain_index(d)
                    .ok_or_else(|| Error::UnknownLabel(d.to_string()))?,
            )
        };
        let tokens: Vec<&str> = src.split_whitespace().collect();
        let cfg = DecodeConfig {
            strategy: if beam > 1 {
                Strategy::Beam { size: beam }
            } else {
                Strategy::Greedy
            },
            ..DecodeConfig::default()
        };
        let ids = m.checkpoint.model.translate(&m.vocab.encode(&tokens), label, &cfg)?;
        let text = m.vocab.decode(&ids).join(" ");
        *out = CString::new(text).expect("tokens have no NUL").into_raw();
        Ok(())
    })
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mdmt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Corpus BLEU (13a tokenization, exponential smoothing) of `n` aligned
/// hypothesis/reference pairs, written to `*out` on the 0..100 scale.
///
/// # Safety
/// `hyps` and `refs` must each point to `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mdmt_corpus_bleu(
    hyps: *const *const c_char,
    refs: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> MdmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let h = str_array(hyps, n, "hyps")?;
        let r = str_array(refs, n, "refs")?;
        *out = corpus_bleu(&h, &r)?.score;
        Ok(())
    })
}

/// Sample standard deviation (denominator `n - 1`) of `n >= 2` values.
///
/// # Safety
/// `values` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdmt_robustness_std(values: *const f64, n: usize, out: *mut f64) -> MdmtStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = robustness_std(std::slice::from_raw_parts(values, n))?;
        Ok(())
    })
}

/// Message of the last failure on this thread, or null if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mdmt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mdmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
