//! C interface to the comparison captioner.
//!
//! Conventions:
//! - every fallible function returns an [`L2cStatus`]; on failure a message
//!   is available from [`l2c_last_error_message`] on the same thread
//! - strings passed in are NUL-terminated UTF-8 and borrowed for the call
//! - strings handed out are owned by the caller and released with
//!   [`l2c_string_free`]
//! - models are opaque handles released with [`l2c_model_free`]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use l2c::data::{generate_dataset, render, CreatureSpec, Dataset, GenConfig, Split};
use l2c::metrics::{bleu4, rouge_l_beta};
use l2c::model::ImageBatch;
use l2c::training::{load_checkpoint, PreparedPairs, Trainer};
use l2c::verify::gradcheck_all;
use l2c::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum L2cStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument was malformed or out of range.
    InvalidArgument = 3,
    /// Dataset contents were unusable.
    Data = 4,
    /// A file could not be read or written.
    Io = 5,
    /// A checkpoint was missing, corrupt or from another format version.
    Checkpoint = 6,
    /// A numerical failure inside the model, such as a non-finite value.
    Numeric = 7,
    /// Gradient checks ran but some exceeded the tolerance.
    VerificationFailed = 8,
    /// An internal panic was caught at the boundary.
    Panic = 9,
}

/// A loaded checkpoint. Opaque to C.
pub struct L2cModel {
    trainer: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> L2cStatus {
    match err {
        Error::Config(_) => L2cStatus::InvalidArgument,
        Error::Data(_) => L2cStatus::Data,
        Error::Io { .. } | Error::Json(_) => L2cStatus::Io,
        Error::Checkpoint { .. } => L2cStatus::Checkpoint,
        _ => L2cStatus::Numeric,
    }
}

struct Failure(L2cStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> L2cStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => L2cStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            L2cStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(L2cStatus::NullArgument, format!("{what} is NULL"))
}

/// # Safety
/// `p` is NULL or a valid NUL-terminated string.
unsafe fn borrow_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(L2cStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn hand_out(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("interior NULs removed")
        .into_raw()
}

/// # Safety
/// `refs` points to `n` valid string pointers.
unsafe fn borrow_refs<'a>(refs: *const *const c_char, n: usize) -> Result<Vec<&'a str>, Failure> {
    if n == 0 {
        return Err(Failure(
            L2cStatus::InvalidArgument,
            "at least one reference is required".into(),
        ));
    }
    if refs.is_null() {
        return Err(null("refs"));
    }
    std::slice::from_raw_parts(refs, n)
        .iter()
        .enumerate()
        .map(|(i, &r)| borrow_str(r, &format!("refs[{i}]")))
        .collect()
}

fn tokens(s: &str) -> Vec<String> {
    l2c::data::tokenize(s)
}

/// Message describing the last failure on this thread, or NULL if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn l2c_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn l2c_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` is NULL or a pointer previously returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn l2c_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads the checkpoint directory `dir` into a new handle stored in `*out`.
///
/// # Safety
/// `dir` is a valid string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn l2c_model_load(dir: *const c_char, out: *mut *mut L2cModel) -> L2cStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = borrow_str(dir, "dir")?;
        let trainer = load_checkpoint(Path::new(dir))?;
        *out = Box::into_raw(Box::new(L2cModel { trainer }));
        Ok(())
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` is NULL or a handle from [`l2c_model_load`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn l2c_model_free(model: *mut L2cModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of tokens, specials included, in the model's vocabulary.
///
/// # Safety
/// `model` is a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn l2c_model_vocab_size(model: *const L2cModel, out: *mut usize) -> L2cStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.trainer.vocab.len();
        Ok(())
    })
}

/// Greedy comparison caption for two creatures given as JSON specs.
/// The caption is stored in `*out` and must be released with [`l2c_string_free`].
///
/// # Safety
/// `model` is a live handle, the specs valid strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn l2c_model_caption_pair(
    model: *const L2cModel,
    spec_a_json: *const c_char,
    spec_b_json: *const c_char,
    out: *mut *mut c_char,
) -> L2cStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let parse = |p, what| -> Result<CreatureSpec, Failure> {
            serde_json::from_str(borrow_str(p, what)?)
                .map_err(|e| Failure(L2cStatus::InvalidArgument, format!("{what}: {e}")))
        };
        let (a, b) = (parse(spec_a_json, "spec_a_json")?, parse(spec_b_json, "spec_b_json")?);
        let model = &m.trainer.model;
        let ((ia, ma), (ib, mb)) = (render(&a), render(&b));
        let ba = ImageBatch::stack([(&ia, &ma)], model.map_size())?;
        let bb = ImageBatch::stack([(&ib, &mb)], model.map_size())?;
        let ids = model.caption_pairs(&ba, &bb, m.trainer.config.max_len)?;
        *out = hand_out(m.trainer.vocab.decode(&ids[0]));
        Ok(())
    })
}

/// Scores the model on a split (`train`, `val` or `test`) of a dataset
/// directory. The report is JSON, stored in `*out_json`.
///
/// # Safety
/// `model` is a live handle, strings are valid and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn l2c_model_evaluate(
    model: *const L2cModel,
    data_dir: *const c_char,
    split: *const c_char,
    out_json: *mut *mut c_char,
) -> L2cStatus {
    guard(|| {
        let out = out_json.as_mut().ok_or_else(|| null("out_json"))?;
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let split: Split = borrow_str(split, "split")?.parse()?;
        let ds = Dataset::load(Path::new(borrow_str(data_dir, "data_dir")?))?;
        if ds.vocab != m.trainer.vocab {
            return Err(Failure(L2cStatus::Data, "dataset and model vocabularies differ".into()));
        }
        let pairs = PreparedPairs::new(&ds.split(split).pairs, &ds.root, &m.trainer.vocab)?;
        let report = m.trainer.evaluate(&pairs, split.name())?;
        *out = hand_out(serde_json::to_string(&report).map_err(Error::from)?);
        Ok(())
    })
}

/// Sentence BLEU-4 of `hyp` against `n_refs` references.
///
/// # Safety
/// `hyp` is a valid string, `refs` points to `n_refs` valid strings and `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn l2c_bleu4(
    hyp: *const c_char,
    refs: *const *const c_char,
    n_refs: usize,
    out: *mut f64,
) -> L2cStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let hyp = tokens(borrow_str(hyp, "hyp")?);
        let refs: Vec<Vec<String>> = borrow_refs(refs, n_refs)?.into_iter().map(tokens).collect();
        *out = bleu4(&hyp, &refs);
        Ok(())
    })
}

/// ROUGE-L F-score (recall weighted by `beta`) of `hyp`, best over the references.
///
/// # Safety
/// As for [`l2c_bleu4`].
#[no_mangle]
pub unsafe extern "C" fn l2c_rouge_l(
    hyp: *const c_char,
    refs: *const *const c_char,
    n_refs: usize,
    beta: f64,
    out: *mut f64,
) -> L2cStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Failure(
                L2cStatus::InvalidArgument,
                format!("beta must be positive, got {beta}"),
            ));
        }
        let hyp = tokens(borrow_str(hyp, "hyp")?);
        let refs: Vec<Vec<String>> = borrow_refs(refs, n_refs)?.into_iter().map(tokens).collect();
        *out = rouge_l_beta(&hyp, &refs, beta);
        Ok(())
    })
}

/// Writes a synthetic dataset (default 80/10/10 split) into `out_dir`.
///
/// # Safety
/// `out_dir` is a valid string.
#[no_mangle]
pub unsafe extern "C" fn l2c_generate_dataset(
    seed: u64,
    n_pairs: usize,
    n_singles: usize,
    out_dir: *const c_char,
) -> L2cStatus {
    guard(|| {
        let dir = Path::new(borrow_str(out_dir, "out_dir")?);
        generate_dataset(&GenConfig::new(seed, n_pairs, n_singles), dir)?.write()?;
        Ok(())
    })
}

/// Runs every gradient check. Stores the number of failing checks and the
/// worst relative error; returns `VerificationFailed` if any check failed.
///
/// # Safety
/// Output pointers are NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn l2c_gradcheck(seed: u64, out_failed: *mut usize, out_max_error: *mut f64) -> L2cStatus {
    guard(|| {
        let rows = gradcheck_all(seed)?;
        let failed = rows.iter().filter(|r| !r.passed()).count();
        let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        if let Some(f) = out_failed.as_mut() {
            *f = failed;
        }
        if let Some(w) = out_max_error.as_mut() {
            *w = worst;
        }
        if failed > 0 {
            return Err(Failure(
                L2cStatus::VerificationFailed,
                format!("{failed} gradient checks failed"),
            ));
        }
        Ok(())
    })
}
