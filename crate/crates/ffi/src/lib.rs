//! C ABI over `latentseq`.
//!
//! Every fallible call returns an [`LsStatus`]; on failure the message is
//! kept per thread and read with [`ls_last_error_message`]. Models are
//! opaque handles created by `*_load` and released by `*_free`. Strings
//! returned to the caller are freed with [`ls_string_free`]. Panics never
//! cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use latentseq::lattice::{
    hmm_forward, semimarkov_expected_segments, semimarkov_forward, semimarkov_marginals, HmmPotentials,
    SegmentalPotentials,
};
use latentseq::ndgrad::Tensor;
use latentseq::pointer::{pointer_mixture, posterior_alignment, PointerState};
use latentseq::segmodel::{constrained_decode, load_checkpoint, DecodeOptions, SegModel};
use latentseq::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    UndefinedPosterior = 5,
    DecodeFailure = 6,
    Checkpoint = 7,
    Config = 8,
    Io = 9,
    Json = 10,
    Panic = 11,
}

impl From<&Error> for LsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => LsStatus::Shape,
            Error::InvalidArgument(_) | Error::MissingOracle(_) => LsStatus::InvalidArgument,
            Error::NonFinite(_) => LsStatus::NonFinite,
            Error::UndefinedPosterior(_) => LsStatus::UndefinedPosterior,
            Error::DecodeFailure(_) => LsStatus::DecodeFailure,
            Error::Checkpoint(_) => LsStatus::Checkpoint,
            Error::Config(_) => LsStatus::Config,
            Error::Io(_) => LsStatus::Io,
            Error::Json(_) => LsStatus::Json,
        }
    }
}

/// A loaded segmental data-to-text model.
pub struct LsSegModel {
    model: SegModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: LsStatus, msg: impl Into<String>) -> LsStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, recording its error or panic.
fn guard(f: impl FnOnce() -> Result<(), LsStatus>) -> LsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LsStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(LsStatus::Panic, msg)
        }
    }
}

fn lib(e: Error) -> LsStatus {
    let s = LsStatus::from(&e);
    fail(s, e.to_string())
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), LsStatus> {
    if p.is_null() {
        Err(fail(LsStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must point to `n` readable values when `n > 0`.
unsafe fn read<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], LsStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    nonnull(p, what)?;
    Ok(slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be a valid NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, LsStatus> {
    nonnull(p, what)?;
    CStr::from_ptr(p).to_str().map_err(|_| fail(LsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn product(dims: &[usize]) -> Result<usize, LsStatus> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fail(LsStatus::InvalidArgument, "table size overflows"))
}

/// # Safety
/// Pointers must hold `m·L·(K+1)`, `m·(K+1)²` and `K+1` values.
unsafe fn segmental(
    gen: *const f64,
    trans: *const f64,
    init: *const f64,
    m: usize,
    l: usize,
    k1: usize,
) -> Result<SegmentalPotentials, LsStatus> {
    let (ng, nt) = (product(&[m, l, k1])?, product(&[m, k1, k1])?);
    let g = read(gen, ng, "gen")?.to_vec();
    let t = read(trans, nt, "trans")?.to_vec();
    let i = read(init, k1, "init")?.to_vec();
    SegmentalPotentials::new(Tensor::new(vec![m, l, k1], g), Tensor::new(vec![m, k1, k1], t), Tensor::vector(i))
        .map_err(lib)
}

/// Version string of the library, static storage.
#[no_mangle]
pub extern "C" fn ls_version() -> *const c_char {
    static V: &CStr = match CStr::from_bytes_with_nul(concat!("v", env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(c) => c,
        Err(_) => panic!("version contains a nul byte"),
    };
    V.as_ptr()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn ls_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Log-partition of a semi-Markov lattice with `m` tokens, segments up to
/// `l` tokens and `k1 = K+1` records. Tables are row-major:
/// `gen[m][l][k1]`, `trans[m][k1][k1]`, `init[k1]`, all log-probabilities.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ls_semimarkov_log_marginal(
    gen: *const f64,
    trans: *const f64,
    init: *const f64,
    m: usize,
    l: usize,
    k1: usize,
    out: *mut f64,
) -> LsStatus {
    guard(|| {
        nonnull(out, "out")?;
        let s = segmental(gen, trans, init, m, l, k1)?;
        *out = semimarkov_forward(&s).map_err(lib)?;
        Ok(())
    })
}

/// Expected number of segments E[τ] under the lattice.
///
/// # Safety
/// As [`ls_semimarkov_log_marginal`].
#[no_mangle]
pub unsafe extern "C" fn ls_semimarkov_expected_segments(
    gen: *const f64,
    trans: *const f64,
    init: *const f64,
    m: usize,
    l: usize,
    k1: usize,
    out: *mut f64,
) -> LsStatus {
    guard(|| {
        nonnull(out, "out")?;
        let s = segmental(gen, trans, init, m, l, k1)?;
        *out = semimarkov_expected_segments(&s).map_err(lib)?;
        Ok(())
    })
}

/// Posterior usage of every `gen` entry, written to `out_gen[m][l][k1]`.
///
/// # Safety
/// As [`ls_semimarkov_log_marginal`]; `out_gen` must hold `m·l·k1` values.
#[no_mangle]
pub unsafe extern "C" fn ls_semimarkov_gen_marginals(
    gen: *const f64,
    trans: *const f64,
    init: *const f64,
    m: usize,
    l: usize,
    k1: usize,
    out_gen: *mut f64,
) -> LsStatus {
    guard(|| {
        nonnull(out_gen, "out_gen")?;
        let s = segmental(gen, trans, init, m, l, k1)?;
        let marg = semimarkov_marginals(&s).map_err(lib)?;
        let src = marg.gen.data();
        slice::from_raw_parts_mut(out_gen, src.len()).copy_from_slice(src);
        Ok(())
    })
}

/// Log-marginal of a first-order HMM with `t` steps and `k` states:
/// `init[k]`, `trans[t][k][k]` (`trans[s][i][j]` = log p(i | j)), `emit[t][k]`.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ls_hmm_log_marginal(
    init: *const f64,
    trans: *const f64,
    emit: *const f64,
    t: usize,
    k: usize,
    out: *mut f64,
) -> LsStatus {
    guard(|| {
        nonnull(out, "out")?;
        let i = read(init, k, "init")?.to_vec();
        let tr = read(trans, product(&[t, k, k])?, "trans")?.to_vec();
        let e = read(emit, product(&[t, k])?, "emit")?.to_vec();
        let p = HmmPotentials::new(Tensor::vector(i), Tensor::new(vec![t, k, k], tr), Tensor::matrix(t, k, e))
            .map_err(lib)?;
        *out = hmm_forward(&p).map_err(lib)?;
        Ok(())
    })
}

/// # Safety
/// Arrays of `n` attention weights, `n` source ids and `v` vocabulary
/// probabilities.
unsafe fn pointer_state(
    p_gen: f64,
    attention: *const f64,
    source_ids: *const usize,
    n: usize,
    p_vocab: *const f64,
    v: usize,
) -> Result<PointerState, LsStatus> {
    let a = read(attention, n, "attention")?.to_vec();
    let s = read(source_ids, n, "source_ids")?.to_vec();
    let pv = read(p_vocab, v, "p_vocab")?.to_vec();
    PointerState::new(p_gen, a, pv, s, None).map_err(lib)
}

/// p(y) = p_gen·p_vocab[y] + (1 − p_gen)·Σᵢ attention[i]·[source_ids[i] = y].
///
/// # Safety
/// See [`pointer_state`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_pointer_mixture(
    p_gen: f64,
    attention: *const f64,
    source_ids: *const usize,
    n: usize,
    p_vocab: *const f64,
    v: usize,
    y: usize,
    out: *mut f64,
) -> LsStatus {
    guard(|| {
        nonnull(out, "out")?;
        let st = pointer_state(p_gen, attention, source_ids, n, p_vocab, v)?;
        *out = pointer_mixture(&st, y);
        Ok(())
    })
}

/// Posterior of generating `y` (`out_gen`) and of copying it from each
/// source position (`out_positions[n]`); they sum to 1.
///
/// # Safety
/// See [`pointer_state`]; `out_gen` and `out_positions[n]` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_pointer_posterior(
    p_gen: f64,
    attention: *const f64,
    source_ids: *const usize,
    n: usize,
    p_vocab: *const f64,
    v: usize,
    y: usize,
    out_gen: *mut f64,
    out_positions: *mut f64,
) -> LsStatus {
    guard(|| {
        nonnull(out_gen, "out_gen")?;
        if n > 0 {
            nonnull(out_positions, "out_positions")?;
        }
        let st = pointer_state(p_gen, attention, source_ids, n, p_vocab, v)?;
        let al = posterior_alignment(&st, y).map_err(lib)?;
        *out_gen = al.gen;
        if n > 0 {
            slice::from_raw_parts_mut(out_positions, n).copy_from_slice(&al.positions);
        }
        Ok(())
    })
}

/// Loads a checkpoint manifest (and its sibling tensor archive) into a new
/// handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ls_segmodel_load(path: *const c_char, out: *mut *mut LsSegModel) -> LsStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = ptr::null_mut();
        let p = read_str(path, "path")?;
        let model = load_checkpoint(Path::new(p)).map_err(lib)?;
        *out = Box::into_raw(Box::new(LsSegModel { model }));
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must come from [`ls_segmodel_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ls_segmodel_free(model: *mut LsSegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Decodes the records `[[slot, value], …]` (JSON) with constrained beam
/// search and writes a JSON object `{tokens, segments: [[start, end,
/// record], …], score}` to `*out_json`, freed with [`ls_string_free`].
///
/// # Safety
/// `model` must be a live handle, `records_json` a NUL-terminated string and
/// `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ls_segmodel_decode(
    model: *const LsSegModel,
    records_json: *const c_char,
    beam: usize,
    out_json: *mut *mut c_char,
) -> LsStatus {
    guard(|| {
        nonnull(out_json, "out_json")?;
        *out_json = ptr::null_mut();
        nonnull(model, "model")?;
        let m = &(*model).model;
        let text = read_str(records_json, "records_json")?;
        let records: Vec<(String, String)> =
            serde_json::from_str(text).map_err(|e| fail(LsStatus::Json, e.to_string()))?;
        if beam == 0 {
            return Err(fail(LsStatus::InvalidArgument, "beam must be positive"));
        }
        let rs = m.vocab.record_set(&records).map_err(lib)?;
        let opts = DecodeOptions { beam, ..DecodeOptions::default() };
        let dec = constrained_decode(m, &rs, &opts).map_err(lib)?;
        let segments: Vec<[usize; 3]> = dec.segments().into_iter().map(|(j, r)| [r.start, r.end, j]).collect();
        let json = serde_json::json!({ "tokens": m.vocab.decode(&dec.tokens), "segments": segments, "score": dec.score });
        let c = CString::new(json.to_string()).map_err(|e| fail(LsStatus::Json, e.to_string()))?;
        *out_json = c.into_raw();
        Ok(())
    })
}

/// Frees a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ls_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
