//! C ABI over the kcache runtime.
//!
//! Every fallible function returns a [`KcStatus`]; on failure a message is
//! stored per thread and read with [`kc_last_error_message`]. Handles are
//! opaque and must be released with their matching `*_free` function.
//! Strings returned to the caller are freed with [`kc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use kcache::engine::{generate, EngineConfig, GenerationReport, Mode, Prompt};
use kcache::model::{generate_weights, load_weights, save_weights, ModelConfig, ModelWeights};
use kcache::perf::{
    decode_mha_cost, decode_transfer_check, kv_cache_bytes, prefill_overlap_check, AttentionMode, DecodeShape,
    HardwareProfile, SubmoduleCost,
};
use kcache::KcError;

/// Status codes returned by every fallible entry point.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KcStatus {
    Ok = 0,
    NullPointer = 1,
    Argument = 2,
    Shape = 3,
    Format = 4,
    State = 5,
    Capacity = 6,
    Overflow = 7,
    Io = 8,
    InvalidUtf8 = 9,
    Panic = 10,
}

pub const KC_MODE_BASELINE: u32 = 0;
pub const KC_MODE_KCACHE: u32 = 1;

/// Loaded or generated model weights.
pub struct KcModel {
    weights: ModelWeights,
}

/// Result of one generation run.
pub struct KcReport {
    report: GenerationReport,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct KcModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct KcRunConfig {
    /// `KC_MODE_BASELINE` or `KC_MODE_KCACHE`.
    pub mode: u32,
    pub top_n: usize,
    pub resident_layers: usize,
    pub renormalize: bool,
    /// Seed for the random prompt.
    pub seed: u64,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub batch: usize,
    pub bytes_per_element: usize,
    /// Fast-tier byte limit; 0 disables the check.
    pub fast_capacity: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct KcProfile {
    pub flops: f64,
    pub bw_gpu: f64,
    pub bw_h2d: f64,
    pub bw_d2h: f64,
    pub fast_capacity: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct KcDecodeShape {
    pub batch: u64,
    pub seq_len: u64,
    pub d_model: u64,
    pub n_heads: u64,
    pub head_dim: u64,
    pub bytes: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct KcSubmoduleCost {
    pub flops: u64,
    pub io_bytes: u64,
    pub h2d_bytes: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct KcCostBreakdown {
    pub qkv: KcSubmoduleCost,
    pub scores: KcSubmoduleCost,
    pub weighted_sum: KcSubmoduleCost,
    pub out_proj: KcSubmoduleCost,
    pub ffn: KcSubmoduleCost,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct KcTransferCheck {
    pub ratio: f64,
    pub threshold: f64,
    pub beneficial: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct KcOverlapCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(KcStatus, String);

impl From<KcError> for Failure {
    fn from(e: KcError) -> Self {
        let status = match &e {
            KcError::Shape(_) => KcStatus::Shape,
            KcError::Argument(_) => KcStatus::Argument,
            KcError::Format { .. } => KcStatus::Format,
            KcError::State(_) => KcStatus::State,
            KcError::Capacity { .. } => KcStatus::Capacity,
            KcError::Overflow(_) => KcStatus::Overflow,
            KcError::Io(_) => KcStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(KcStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            KcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            KcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(KcStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn profile(p: &KcProfile) -> HardwareProfile {
    HardwareProfile {
        name: "ffi".into(),
        flops: p.flops,
        bw_gpu: p.bw_gpu,
        bw_h2d: p.bw_h2d,
        bw_d2h: p.bw_d2h,
        fast_capacity: p.fast_capacity,
        note: None,
    }
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn kc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates seeded weights for a preset (`"toy"`).
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_model_generate(preset: *const c_char, seed: u64, out: *mut *mut KcModel) -> KcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let name = str_arg(preset, "preset")?;
        if name == "7b-shape" {
            return Err(Failure(KcStatus::Argument, "7b-shape is shape-only".into()));
        }
        let cfg = ModelConfig::preset(name)
            .ok_or_else(|| Failure(KcStatus::Argument, format!("unknown preset '{name}'")))?;
        let weights = generate_weights(&cfg, seed)?;
        *out = Box::into_raw(Box::new(KcModel { weights }));
        Ok(())
    })
}

/// Loads weights from a file written by [`kc_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_model_load(path: *const c_char, out: *mut *mut KcModel) -> KcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let weights = load_weights(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(KcModel { weights }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn kc_model_save(model: *const KcModel, path: *const c_char) -> KcStatus {
    guard(|| {
        let model = in_arg(model, "model")?;
        save_weights(&model.weights, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_model_config(model: *const KcModel, out: *mut KcModelConfig) -> KcStatus {
    guard(|| {
        let c = in_arg(model, "model")?.weights.config;
        *out_arg(out, "out")? = KcModelConfig {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            head_dim: c.head_dim,
            ffn_hidden: c.ffn_hidden,
            vocab: c.vocab,
            max_seq: c.max_seq,
        };
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kc_model_free(model: *mut KcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Baseline defaults: prompt 64, generation 32, batch 1, 2 bytes/element.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_run_config_default(out: *mut KcRunConfig) -> KcStatus {
    guard(|| {
        *out_arg(out, "out")? = KcRunConfig {
            mode: KC_MODE_BASELINE,
            top_n: 0,
            resident_layers: 0,
            renormalize: false,
            seed: 0,
            prompt_len: 64,
            gen_len: 32,
            batch: 1,
            bytes_per_element: 2,
            fast_capacity: 0,
        };
        Ok(())
    })
}

/// Runs prefill plus greedy decode over a seeded random prompt.
///
/// # Safety
/// `model` must come from this library; `config` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kc_generate(model: *const KcModel, config: *const KcRunConfig, out: *mut *mut KcReport) -> KcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let w = &in_arg(model, "model")?.weights;
        let c = in_arg(config, "config")?;
        let mode = match c.mode {
            KC_MODE_BASELINE => Mode::Baseline,
            KC_MODE_KCACHE => Mode::KCache,
            other => return Err(Failure(KcStatus::Argument, format!("unknown mode {other}"))),
        };
        let cfg = EngineConfig {
            mode,
            top_n: c.top_n,
            resident_layers: c.resident_layers,
            renormalize: c.renormalize,
            seed: c.seed,
            prompt_len: c.prompt_len,
            gen_len: c.gen_len,
            batch: c.batch,
            bytes_per_element: c.bytes_per_element,
            fast_capacity: (c.fast_capacity > 0).then_some(c.fast_capacity),
            ..EngineConfig::baseline(c.seed, c.prompt_len, c.gen_len)
        };
        let prompt = Prompt::random(c.seed, c.batch, c.prompt_len, w.config.vocab);
        let report = generate(&cfg, w, &prompt)?;
        *out = Box::into_raw(Box::new(KcReport { report }));
        Ok(())
    })
}

/// Batch size and tokens generated per row.
///
/// # Safety
/// `report` must come from this library; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn kc_report_shape(report: *const KcReport, batch: *mut usize, gen_len: *mut usize) -> KcStatus {
    guard(|| {
        let r = &in_arg(report, "report")?.report;
        *out_arg(batch, "batch")? = r.tokens.len();
        *out_arg(gen_len, "gen_len")? = r.tokens.first().map_or(0, Vec::len);
        Ok(())
    })
}

/// Copies the tokens of one batch row into `buf`. `len` receives the row
/// length; the call fails with `Argument` when `cap` is too small.
///
/// # Safety
/// `buf` must hold `cap` elements (may be null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn kc_report_tokens(
    report: *const KcReport,
    row: usize,
    buf: *mut u32,
    cap: usize,
    len: *mut usize,
) -> KcStatus {
    guard(|| {
        let r = &in_arg(report, "report")?.report;
        let tokens = r
            .tokens
            .get(row)
            .ok_or_else(|| Failure(KcStatus::Argument, format!("row {row} out of range")))?;
        *out_arg(len, "len")? = tokens.len();
        if cap < tokens.len() {
            return Err(Failure(KcStatus::Argument, format!("buffer holds {cap}, need {}", tokens.len())));
        }
        if !tokens.is_empty() {
            if buf.is_null() {
                return Err(null("buf"));
            }
            ptr::copy_nonoverlapping(tokens.as_ptr(), buf, tokens.len());
        }
        Ok(())
    })
}

/// Ledger totals in bytes.
///
/// # Safety
/// `report` must come from this library; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn kc_report_ledger(report: *const KcReport, d2h_bytes: *mut u64, h2d_bytes: *mut u64) -> KcStatus {
    guard(|| {
        let r = &in_arg(report, "report")?.report;
        *out_arg(d2h_bytes, "d2h_bytes")? = r.ledger.d2h_bytes;
        *out_arg(h2d_bytes, "h2d_bytes")? = r.ledger.h2d_bytes;
        Ok(())
    })
}

/// Full report as JSON. Free with [`kc_string_free`].
///
/// # Safety
/// `report` must come from this library; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kc_report_json(report: *const KcReport, out: *mut *mut c_char) -> KcStatus {
    guard(|| {
        let r = &in_arg(report, "report")?.report;
        let out = out_arg(out, "out")?;
        *out = CString::new(r.to_json()).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kc_report_free(report: *mut KcReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Built-in hardware profile by name (`"a100-80g"`, `"eval-gpu"`).
///
/// # Safety
/// `name` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kc_profile_builtin(name: *const c_char, out: *mut KcProfile) -> KcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let name = str_arg(name, "name")?;
        let p = HardwareProfile::builtin(name)
            .ok_or_else(|| Failure(KcStatus::Argument, format!("unknown profile '{name}'")))?;
        *out = KcProfile { flops: p.flops, bw_gpu: p.bw_gpu, bw_h2d: p.bw_h2d, bw_d2h: p.bw_d2h, fast_capacity: p.fast_capacity };
        Ok(())
    })
}

/// Baseline KV cache size `2 * b * s * d * l * bytes`.
///
/// # Safety
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kc_kv_cache_bytes(b: u64, s: u64, d: u64, l: u64, bytes: u64, out: *mut u64) -> KcStatus {
    guard(|| {
        *out_arg(out, "out")? = kv_cache_bytes(b, s, d, l, bytes)?;
        Ok(())
    })
}

/// # Safety
/// `profile` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kc_decode_transfer_check(
    s: u64,
    top_n: u64,
    profile_in: *const KcProfile,
    out: *mut KcTransferCheck,
) -> KcStatus {
    guard(|| {
        let p = profile(in_arg(profile_in, "profile")?);
        p.validate()?;
        let c = decode_transfer_check(s, top_n, &p)?;
        *out_arg(out, "out")? = KcTransferCheck { ratio: c.ratio, threshold: c.threshold, beneficial: c.beneficial };
        Ok(())
    })
}

/// # Safety
/// `profile` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kc_prefill_overlap_check(
    s: u64,
    d: u64,
    b: u64,
    bytes: u64,
    profile_in: *const KcProfile,
    out: *mut KcOverlapCheck,
) -> KcStatus {
    guard(|| {
        let p = profile(in_arg(profile_in, "profile")?);
        p.validate()?;
        let c = prefill_overlap_check(s, d, b, bytes, &p);
        *out_arg(out, "out")? = KcOverlapCheck { lhs: c.lhs, rhs: c.rhs, holds: c.holds };
        Ok(())
    })
}

fn cost(c: SubmoduleCost) -> KcSubmoduleCost {
    KcSubmoduleCost { flops: c.flops, io_bytes: c.io_bytes, h2d_bytes: c.h2d_bytes }
}

/// Per-layer decode cost. `top_n == 0` selects full attention.
///
/// # Safety
/// `shape` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kc_decode_mha_cost(
    shape: *const KcDecodeShape,
    ffn_hidden: u64,
    top_n: u64,
    out: *mut KcCostBreakdown,
) -> KcStatus {
    guard(|| {
        let s = in_arg(shape, "shape")?;
        let shape = DecodeShape {
            batch: s.batch,
            seq_len: s.seq_len,
            d_model: s.d_model,
            n_heads: s.n_heads,
            head_dim: s.head_dim,
            bytes: s.bytes,
        };
        let mode = if top_n == 0 { AttentionMode::Full } else { AttentionMode::TopN(top_n) };
        let c = decode_mha_cost(&shape, ffn_hidden, mode)?;
        *out_arg(out, "out")? = KcCostBreakdown {
            qkv: cost(c.qkv),
            scores: cost(c.scores),
            weighted_sum: cost(c.weighted_sum),
            out_proj: cost(c.out_proj),
            ffn: cost(c.ffn),
        };
        Ok(())
    })
}
