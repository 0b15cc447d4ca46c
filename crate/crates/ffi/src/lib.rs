//! C interface to nmtlab.
//!
//! Every fallible function returns an [`NmtStatus`]. On failure the message
//! is available from [`nmt_last_error`] on the same thread. Strings handed
//! out by the library must be released with [`nmt_string_free`]; handles
//! with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nmtlab::backtranslate::{NeuralTranslator, Translator};
use nmtlab::corpus::normalize_line;
use nmtlab::model::{Checkpoint, DecodeMode, DecodeOptions};
use nmtlab::stats::{bonferroni, ttest, TTestVariant};
use nmtlab::subword::{apply_bpe, decode_tokens, learn_bpe, BpeModel};
use nmtlab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad input detected before any work: sizes, ranges, configuration.
    InvalidArgument = 3,
    Io = 4,
    /// Any other failure inside the library.
    Runtime = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmtTTestVariant {
    Paired = 0,
    Welch = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmtScores {
    pub bleu: f64,
    pub chrf: f64,
    pub ter: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmtTTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// Nonzero when both groups have zero spread but different means.
    pub degenerate: u8,
}

/// Opaque BPE model.
pub struct NmtBpe(BpeModel);

/// Opaque trained model with its vocabulary and decoding settings.
pub struct NmtTranslator(NeuralTranslator);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(NmtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = if e.is_validation() {
            NmtStatus::InvalidArgument
        } else if matches!(e, Error::Io { .. }) {
            NmtStatus::Io
        } else {
            NmtStatus::Runtime
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NmtStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NmtStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(NmtStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(NmtStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn str_array<'a>(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<&'a str>, Fail> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(Fail(NmtStatus::NullPointer, format!("`{name}` is null")));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .map(|&s| str_arg(s, name))
        .collect()
}

unsafe fn f64_array<'a>(p: *const f64, n: usize, name: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(NmtStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn out_ptr<T>(p: *mut T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(NmtStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

fn into_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn nmt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a model written as a merges file plus a vocabulary file.
///
/// # Safety
/// Path arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmt_bpe_load(merges_path: *const c_char, vocab_path: *const c_char, out: *mut *mut NmtBpe) -> NmtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let m = str_arg(merges_path, "merges_path")?;
        let v = str_arg(vocab_path, "vocab_path")?;
        let model = BpeModel::load(Path::new(m), Path::new(v))?;
        *out = Box::into_raw(Box::new(NmtBpe(model)));
        Ok(())
    })
}

/// Learns `num_merges` merges from `n` lines.
///
/// # Safety
/// `lines` must point to `n` NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmt_bpe_learn(lines: *const *const c_char, n: usize, num_merges: usize, out: *mut *mut NmtBpe) -> NmtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let lines = str_array(lines, n, "lines")?;
        let model = learn_bpe(&lines, num_merges)?;
        *out = Box::into_raw(Box::new(NmtBpe(model)));
        Ok(())
    })
}

/// Saves a model to a merges file and a vocabulary file.
///
/// # Safety
/// `bpe` must come from this library; paths must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn nmt_bpe_save(bpe: *const NmtBpe, merges_path: *const c_char, vocab_path: *const c_char) -> NmtStatus {
    guard(|| {
        let bpe = bpe.as_ref().ok_or(Fail(NmtStatus::NullPointer, "`bpe` is null".into()))?;
        let m = str_arg(merges_path, "merges_path")?;
        let v = str_arg(vocab_path, "vocab_path")?;
        bpe.0.save(Path::new(m), Path::new(v))?;
        Ok(())
    })
}

/// Segments one line; tokens are joined by single spaces. `dropout` of 0
/// gives the deterministic segmentation.
///
/// # Safety
/// `bpe` must come from this library; `out` receives a string to free with
/// `nmt_string_free`.
#[no_mangle]
pub unsafe extern "C" fn nmt_bpe_apply(bpe: *const NmtBpe, line: *const c_char, dropout: f64, seed: u64, out: *mut *mut c_char) -> NmtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let bpe = bpe.as_ref().ok_or(Fail(NmtStatus::NullPointer, "`bpe` is null".into()))?;
        let line = str_arg(line, "line")?;
        let seg = apply_bpe(line, &bpe.0, dropout, seed)?;
        *out = into_c(seg.tokens.join(" "));
        Ok(())
    })
}

/// Inverse of `nmt_bpe_apply`: space-separated subword tokens back to text.
///
/// # Safety
/// `tokens` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmt_bpe_decode(tokens: *const c_char, out: *mut *mut c_char) -> NmtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let toks: Vec<&str> = str_arg(tokens, "tokens")?.split_whitespace().collect();
        *out = into_c(decode_tokens(&toks)?);
        Ok(())
    })
}

/// # Safety
/// `bpe` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn nmt_bpe_free(bpe: *mut NmtBpe) {
    if !bpe.is_null() {
        drop(Box::from_raw(bpe));
    }
}

/// Loads a checkpoint and the subword model it was trained with. A
/// `beam_size` of 0 or 1 decodes greedily.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmt_translator_load(
    checkpoint_path: *const c_char,
    merges_path: *const c_char,
    vocab_path: *const c_char,
    beam_size: usize,
    max_len: usize,
    out: *mut *mut NmtTranslator,
) -> NmtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let ck = Checkpoint::load(Path::new(str_arg(checkpoint_path, "checkpoint_path")?))?;
        let bpe = BpeModel::load(
            Path::new(str_arg(merges_path, "merges_path")?),
            Path::new(str_arg(vocab_path, "vocab_path")?),
        )?;
        let mode = if beam_size <= 1 {
            DecodeMode::Greedy
        } else {
            DecodeMode::Beam {
                beam_size,
                length_penalty: 1.0,
            }
        };
        let t = NeuralTranslator::from_checkpoint(ck, bpe, DecodeOptions { mode, max_len })?;
        *out = Box::into_raw(Box::new(NmtTranslator(t)));
        Ok(())
    })
}

/// Translates one line. The input is normalized first.
///
/// # Safety
/// `t` must come from this library; `out` receives a string to free with
/// `nmt_string_free`.
#[no_mangle]
pub unsafe extern "C" fn nmt_translate(t: *const NmtTranslator, line: *const c_char, out: *mut *mut c_char) -> NmtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let t = t.as_ref().ok_or(Fail(NmtStatus::NullPointer, "`t` is null".into()))?;
        let line = normalize_line(str_arg(line, "line")?);
        *out = into_c(t.0.translate_line(&line)?);
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn nmt_translator_free(t: *mut NmtTranslator) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Corpus BLEU, chrF and TER of `n` hypothesis lines against `n` references.
///
/// # Safety
/// `hyps` and `refs` must each point to `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn nmt_score(hyps: *const *const c_char, refs: *const *const c_char, n: usize, out: *mut NmtScores) -> NmtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let h = str_array(hyps, n, "hyps")?;
        let r = str_array(refs, n, "refs")?;
        let s = nmtlab::metrics::score_lines(&h, &r)?;
        *out = NmtScores {
            bleu: s.bleu.value,
            chrf: s.chrf.value,
            ter: s.ter.value,
        };
        Ok(())
    })
}

/// Two-tailed t-test of `a` against `b`. The paired variant needs equal
/// lengths.
///
/// # Safety
/// `a` and `b` must point to `na` and `nb` doubles.
#[no_mangle]
pub unsafe extern "C" fn nmt_ttest(a: *const f64, na: usize, b: *const f64, nb: usize, variant: NmtTTestVariant, out: *mut NmtTTest) -> NmtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let a = f64_array(a, na, "a")?;
        let b = f64_array(b, nb, "b")?;
        let v = match variant {
            NmtTTestVariant::Paired => TTestVariant::Paired,
            NmtTTestVariant::Welch => TTestVariant::Welch,
        };
        let r = ttest(a, b, v)?;
        *out = NmtTTest {
            t: r.t,
            df: r.df,
            p: r.p,
            degenerate: r.degenerate as u8,
        };
        Ok(())
    })
}

/// Bonferroni correction over the `n` raw p-values. Writes `n` corrected
/// values and `n` reject flags (1 when the corrected value is below
/// `alpha`).
///
/// # Safety
/// `raw_p` must hold `n` doubles; `corrected` and `reject` must have room for
/// `n` entries.
#[no_mangle]
pub unsafe extern "C" fn nmt_bonferroni(raw_p: *const f64, n: usize, alpha: f64, corrected: *mut f64, reject: *mut u8) -> NmtStatus {
    guard(|| {
        let p = f64_array(raw_p, n, "raw_p")?;
        if n > 0 {
            out_ptr(corrected, "corrected")?;
            out_ptr(reject, "reject")?;
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Fail(NmtStatus::InvalidArgument, format!("alpha {alpha} outside (0, 1)")));
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Fail(NmtStatus::InvalidArgument, "p-values must lie in [0, 1]".into()));
        }
        for (i, adj) in bonferroni(p, alpha).into_iter().enumerate() {
            *corrected.add(i) = adj.corrected_p;
            *reject.add(i) = adj.reject as u8;
        }
        Ok(())
    })
}
