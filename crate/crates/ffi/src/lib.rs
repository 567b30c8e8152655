//! C ABI over the selfner toolkit.
//!
//! Every function returns a [`SelfnerStatus`]. On failure the message is
//! available from [`selfner_last_error`] on the same thread. Strings handed
//! out through `char **` parameters are owned by the caller and must be
//! released with [`selfner_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use libc::{c_char, c_int, size_t};
use selfner::corpus::{AnnotatedSample, EntityPair, LabelSet};
use selfner::eval::micro_f1;
use selfner::pipeline::read_records;
use selfner::prompting::{build_icl_prompt, build_zero_shot_prompt, parse_answer, ParseStatus};
use selfner::retrieval::{retrieve, DemoIndex, DemoPool, Embedder, LocalEmbedder, RetrievalPolicy};
use selfner::selection::ScoreChannel;
use selfner::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfnerStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    ConfigError = 4,
    DataError = 5,
    BackendError = 6,
    Panic = 7,
}

/// Opaque handle to a loaded demonstration pool.
pub struct SelfnerPool {
    pool: DemoPool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(SelfnerStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            1 => SelfnerStatus::ConfigError,
            3 => SelfnerStatus::BackendError,
            _ => SelfnerStatus::DataError,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(SelfnerStatus::InvalidJson, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> SelfnerStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SelfnerStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SelfnerStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure(SelfnerStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SelfnerStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure(SelfnerStatus::NullArgument, "output pointer is null".into()));
    }
    let c = CString::new(s).map_err(|_| Failure(SelfnerStatus::DataError, "result contains a nul byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn labelset_arg(p: *const c_char) -> FfiResult<LabelSet> {
    if p.is_null() {
        return Ok(LabelSet::ace05());
    }
    let ls: LabelSet = serde_json::from_str(str_arg(p, "labelset")?)?;
    ls.validate()?;
    Ok(ls)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn selfner_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map(|c| c.as_ptr()).unwrap_or(ptr::null()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn selfner_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a raw model answer. `out_json` receives `[["span","type"],...]`
/// and `out_status` 0 (ok), 1 (recovered) or 2 (failed).
///
/// # Safety
/// `raw` must be a nul-terminated string; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn selfner_parse_answer(
    raw: *const c_char,
    out_json: *mut *mut c_char,
    out_status: *mut c_int,
) -> SelfnerStatus {
    guard(|| {
        let parsed = parse_answer(str_arg(raw, "raw")?);
        if out_status.is_null() {
            return Err(Failure(SelfnerStatus::NullArgument, "out_status is null".into()));
        }
        put_string(out_json, serde_json::to_string(&parsed.predictions)?)?;
        *out_status = match parsed.status {
            ParseStatus::Ok => 0,
            ParseStatus::Recovered => 1,
            ParseStatus::Failed => 2,
        };
        Ok(())
    })
}

/// Zero-shot prompt for `text`. A null `labelset_json` selects ACE05;
/// otherwise it is `{"name": ..., "types": [...]}`.
///
/// # Safety
/// String arguments must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selfner_zero_shot_prompt(
    labelset_json: *const c_char,
    text: *const c_char,
    out: *mut *mut c_char,
) -> SelfnerStatus {
    guard(|| {
        let ls = labelset_arg(labelset_json)?;
        put_string(out, build_zero_shot_prompt(&ls, str_arg(text, "text")?))
    })
}

/// In-context prompt. `demos_json` is `[["text", [["span","type"],...]],...]`
/// in prompt order.
///
/// # Safety
/// String arguments must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selfner_icl_prompt(
    labelset_json: *const c_char,
    demos_json: *const c_char,
    query: *const c_char,
    out: *mut *mut c_char,
) -> SelfnerStatus {
    guard(|| {
        let ls = labelset_arg(labelset_json)?;
        let demos: Vec<(String, Vec<EntityPair>)> = serde_json::from_str(str_arg(demos_json, "demos_json")?)?;
        put_string(out, build_icl_prompt(&ls, &demos, str_arg(query, "query")?))
    })
}

/// Micro P/R/F1. Both inputs are `[["id", [["span","type"],...]],...]`;
/// the report is written as JSON.
///
/// # Safety
/// String arguments must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selfner_micro_f1(
    predictions_json: *const c_char,
    golds_json: *const c_char,
    out_report_json: *mut *mut c_char,
) -> SelfnerStatus {
    guard(|| {
        let preds: Vec<(String, Vec<EntityPair>)> = serde_json::from_str(str_arg(predictions_json, "predictions")?)?;
        let golds: Vec<(String, Vec<EntityPair>)> = serde_json::from_str(str_arg(golds_json, "golds")?)?;
        let report = micro_f1(&preds, &golds)?;
        put_string(out_report_json, serde_json::to_string(&report)?)
    })
}

/// Load a pool file. With a null `index_path` the pool is embedded with the
/// local embedder; a given index must have been built with it.
///
/// # Safety
/// Paths must be nul-terminated; `out` must be writable. The handle must be
/// released with [`selfner_pool_free`].
#[no_mangle]
pub unsafe extern "C" fn selfner_pool_open(
    pool_path: *const c_char,
    index_path: *const c_char,
    out: *mut *mut SelfnerPool,
) -> SelfnerStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(SelfnerStatus::NullArgument, "out is null".into()));
        }
        let (_, samples): (_, Vec<AnnotatedSample>) = read_records(Path::new(str_arg(pool_path, "pool_path")?))?;
        let index = if index_path.is_null() {
            DemoIndex::build(&samples, &LocalEmbedder)?
        } else {
            let index = DemoIndex::read(Path::new(str_arg(index_path, "index_path")?))?;
            index.check_embedder(&LocalEmbedder)?;
            index
        };
        let pool = DemoPool::new(samples, &index, ScoreChannel::Sc)?;
        *out = Box::into_raw(Box::new(SelfnerPool { pool }));
        Ok(())
    })
}

/// Number of samples in the pool.
///
/// # Safety
/// `pool` must be a live handle; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selfner_pool_len(pool: *const SelfnerPool, out_len: *mut size_t) -> SelfnerStatus {
    guard(|| {
        if pool.is_null() || out_len.is_null() {
            return Err(Failure(SelfnerStatus::NullArgument, "pool or out_len is null".into()));
        }
        *out_len = (*pool).pool.len();
        Ok(())
    })
}

/// Retrieve demonstration ids for `query_text`. `policy_json` is
/// `{"kind": "diverse_sc_ranking", "k": 16, "big_k": 50, "seed": 0}`;
/// `out_ids_json` receives the ids best first.
///
/// # Safety
/// `pool` must be a live handle; strings must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn selfner_pool_retrieve(
    pool: *const SelfnerPool,
    query_text: *const c_char,
    policy_json: *const c_char,
    out_ids_json: *mut *mut c_char,
) -> SelfnerStatus {
    guard(|| {
        if pool.is_null() {
            return Err(Failure(SelfnerStatus::NullArgument, "pool is null".into()));
        }
        let policy: RetrievalPolicy = serde_json::from_str(str_arg(policy_json, "policy_json")?)?;
        let query = LocalEmbedder.embed(str_arg(query_text, "query_text")?)?;
        let r = retrieve(&(*pool).pool, &query, &policy)?;
        put_string(out_ids_json, serde_json::to_string(&r.ids)?)
    })
}

/// Release a pool handle. Null is ignored.
///
/// # Safety
/// `pool` must come from [`selfner_pool_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn selfner_pool_free(pool: *mut SelfnerPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}
