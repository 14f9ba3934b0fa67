//! C ABI over the orepipe primitives: keyword matching, hash embeddings,
//! exact cosine search and the paired-test statistics.
//!
//! Every function returns an [`OrepipeStatus`] (except the infallible ones)
//! and writes results through out-pointers. On failure the message is kept
//! per thread and read with [`orepipe_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Pointers must be valid for
//! the stated lengths; strings are NUL-terminated UTF-8.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, UnwindSafe};
use std::ptr;

use orepipe_core::embed::{cosine_similarity, hash_embed, EmbeddingVector, VectorIndex};
use orepipe_core::evalkit;
use orepipe_core::glossary::{Glossary, KeywordMatcher};
use orepipe_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrepipeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    DimensionMismatch = 4,
    ZeroVector = 5,
    BufferTooSmall = 6,
    Panic = 7,
    Internal = 8,
}

/// Paired t-test results.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OrepipeTTest {
    pub t_stat: f64,
    pub df: u64,
    /// Zero when the probability underflows; the log10 fields stay finite.
    pub p_one_tail: f64,
    pub p_two_tail: f64,
    pub log10_p_one_tail: f64,
    pub log10_p_two_tail: f64,
    pub t_critical_one_tail: f64,
    pub t_critical_two_tail: f64,
}

/// Compiled keyword matcher.
pub struct OrepipeMatcher {
    matcher: KeywordMatcher,
    keywords: Vec<CString>,
}

/// Exact cosine index.
pub struct OrepipeIndex {
    index: VectorIndex,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

struct Failure(OrepipeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::DimensionMismatch { .. } => OrepipeStatus::DimensionMismatch,
            Error::ZeroVector => OrepipeStatus::ZeroVector,
            Error::InvalidArgument(_) | Error::Glossary(_) | Error::DuplicateId(_) => OrepipeStatus::InvalidArgument,
            _ => OrepipeStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: OrepipeStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

/// Runs `body`, converting errors and panics into a status.
fn guard(body: impl FnOnce() -> Result<(), Failure> + UnwindSafe) -> OrepipeStatus {
    match catch_unwind(body) {
        Ok(Ok(())) => OrepipeStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {message}"));
            OrepipeStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(OrepipeStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(OrepipeStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(OrepipeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(OrepipeStatus::NullPointer, format!("{what} is null")))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn orepipe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn orepipe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Builds a matcher from `count` keywords. Keywords that normalize to the same
/// words are rejected. Counts follow [`orepipe_matcher_keyword`] order.
#[no_mangle]
pub unsafe extern "C" fn orepipe_matcher_new(
    keywords: *const *const c_char,
    count: usize,
    matcher: *mut *mut OrepipeMatcher,
) -> OrepipeStatus {
    guard(|| {
        let slot = out(matcher, "matcher")?;
        let mut words = Vec::with_capacity(count);
        for (i, &p) in slice(keywords, count, "keywords")?.iter().enumerate() {
            words.push(text(p, &format!("keywords[{i}]"))?.to_owned());
        }
        let glossary = Glossary::from_keywords(words)?;
        let m = KeywordMatcher::new(&glossary);
        let keywords = m
            .keywords()
            .iter()
            .map(|k| CString::new(k.as_str()).unwrap_or_default())
            .collect();
        *slot = Box::into_raw(Box::new(OrepipeMatcher { matcher: m, keywords }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn orepipe_matcher_free(matcher: *mut OrepipeMatcher) {
    if !matcher.is_null() {
        drop(Box::from_raw(matcher));
    }
}

/// Number of distinct keywords, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn orepipe_matcher_len(matcher: *const OrepipeMatcher) -> usize {
    matcher.as_ref().map_or(0, |m| m.keywords.len())
}

/// Normalized keyword `i`, owned by the matcher; null when out of range.
#[no_mangle]
pub unsafe extern "C" fn orepipe_matcher_keyword(matcher: *const OrepipeMatcher, i: usize) -> *const c_char {
    matcher
        .as_ref()
        .and_then(|m| m.keywords.get(i))
        .map_or(ptr::null(), |k| k.as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn orepipe_matcher_is_match(
    matcher: *const OrepipeMatcher,
    text_in: *const c_char,
    matched: *mut bool,
) -> OrepipeStatus {
    guard(|| {
        let m = matcher
            .as_ref()
            .ok_or_else(|| fail(OrepipeStatus::NullPointer, "matcher is null"))?;
        let t = text(text_in, "text")?;
        *out(matched, "matched")? = m.matcher.is_match(t);
        Ok(())
    })
}

/// Writes per-keyword occurrence counts into `counts`, which must hold
/// [`orepipe_matcher_len`] entries.
#[no_mangle]
pub unsafe extern "C" fn orepipe_matcher_count(
    matcher: *const OrepipeMatcher,
    text_in: *const c_char,
    counts: *mut u64,
    counts_len: usize,
) -> OrepipeStatus {
    guard(|| {
        let m = matcher
            .as_ref()
            .ok_or_else(|| fail(OrepipeStatus::NullPointer, "matcher is null"))?;
        let t = text(text_in, "text")?;
        let n = m.keywords.len();
        if counts_len < n {
            return Err(fail(
                OrepipeStatus::BufferTooSmall,
                format!("counts holds {counts_len}, need {n}"),
            ));
        }
        if counts.is_null() {
            return Err(fail(OrepipeStatus::NullPointer, "counts is null"));
        }
        let dense = std::slice::from_raw_parts_mut(counts, n);
        dense.fill(0);
        for (k, c) in m.matcher.count_indices(t) {
            dense[k] = c;
        }
        Ok(())
    })
}

/// Unit-norm hash embedding of `text` into `out_vec[0..dim]`.
#[no_mangle]
pub unsafe extern "C" fn orepipe_hash_embed(text_in: *const c_char, dim: usize, out_vec: *mut f64) -> OrepipeStatus {
    guard(|| {
        let t = text(text_in, "text")?;
        if out_vec.is_null() {
            return Err(fail(OrepipeStatus::NullPointer, "out_vec is null"));
        }
        let v = hash_embed(t, dim)?;
        std::slice::from_raw_parts_mut(out_vec, dim).copy_from_slice(v.as_slice());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn orepipe_cosine(
    u: *const f64,
    v: *const f64,
    dim: usize,
    similarity: *mut f64,
) -> OrepipeStatus {
    guard(|| {
        let (u, v) = (slice(u, dim, "u")?, slice(v, dim, "v")?);
        *out(similarity, "similarity")? = cosine_similarity(u, v)?;
        Ok(())
    })
}

/// Builds an index over `rows` row-major vectors of length `dim`.
#[no_mangle]
pub unsafe extern "C" fn orepipe_index_new(
    data: *const f64,
    rows: usize,
    dim: usize,
    index: *mut *mut OrepipeIndex,
) -> OrepipeStatus {
    guard(|| {
        let slot = out(index, "index")?;
        if dim == 0 {
            return Err(fail(OrepipeStatus::InvalidArgument, "dim must be at least 1"));
        }
        let len = rows
            .checked_mul(dim)
            .ok_or_else(|| fail(OrepipeStatus::InvalidArgument, "rows * dim overflows"))?;
        let flat = slice(data, len, "data")?;
        let vectors = flat
            .chunks(dim)
            .map(|r| EmbeddingVector::new(r.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let built = VectorIndex::build(&vectors)?;
        *slot = Box::into_raw(Box::new(OrepipeIndex { index: built }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn orepipe_index_free(index: *mut OrepipeIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

#[no_mangle]
pub unsafe extern "C" fn orepipe_index_len(index: *const OrepipeIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.len())
}

/// Nearest row by cosine similarity; ties go to the lowest row.
#[no_mangle]
pub unsafe extern "C" fn orepipe_index_top1(
    index: *const OrepipeIndex,
    query: *const f64,
    dim: usize,
    row: *mut usize,
    similarity: *mut f64,
) -> OrepipeStatus {
    guard(|| {
        let idx = index
            .as_ref()
            .ok_or_else(|| fail(OrepipeStatus::NullPointer, "index is null"))?;
        let q = slice(query, dim, "query")?;
        let (row, similarity) = (out(row, "row")?, out(similarity, "similarity")?);
        let hit = idx.index.top1(q)?;
        *row = hit.ref_index;
        *similarity = hit.score;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn orepipe_ttest_from_summary(
    mean_1: f64,
    variance_1: f64,
    mean_2: f64,
    variance_2: f64,
    n: usize,
    pearson_r: f64,
    result: *mut OrepipeTTest,
) -> OrepipeStatus {
    guard(|| {
        let slot = out(result, "result")?;
        let r = evalkit::ttest_from_summary(mean_1, variance_1, mean_2, variance_2, n, pearson_r)?;
        *slot = OrepipeTTest {
            t_stat: r.t_stat,
            df: r.df as u64,
            p_one_tail: r.p_one_tail.value(),
            p_two_tail: r.p_two_tail.value(),
            log10_p_one_tail: r.log10_p_one_tail,
            log10_p_two_tail: r.log10_p_two_tail,
            t_critical_one_tail: r.t_critical_one_tail,
            t_critical_two_tail: r.t_critical_two_tail,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn orepipe_pearson(x: *const f64, y: *const f64, n: usize, r: *mut f64) -> OrepipeStatus {
    guard(|| {
        let (x, y) = (slice(x, n, "x")?, slice(y, n, "y")?);
        *out(r, "r")? = evalkit::pearson(x, y)?;
        Ok(())
    })
}

/// Percentage deviation of a fine-tuned score from its base score.
#[no_mangle]
pub unsafe extern "C" fn orepipe_deviation(finetuned: f64, base: f64, percent: *mut f64) -> OrepipeStatus {
    guard(|| {
        *out(percent, "percent")? = evalkit::deviation_metric(finetuned, base)?;
        Ok(())
    })
}

/// True when `similarity` is strictly above `threshold`.
#[no_mangle]
pub extern "C" fn orepipe_judge_is_correct(similarity: f64, threshold: f64) -> bool {
    evalkit::is_correct(similarity, threshold)
}
