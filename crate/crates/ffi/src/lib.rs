//! C ABI over `domlens`.
//!
//! Objects cross the boundary as opaque handles created by `domlens_*_new` /
//! `domlens_*_read_*` and released with the matching `*_free`. Every fallible
//! call returns a [`DomlensStatus`]; on failure the message is available from
//! [`domlens_last_error`] on the same thread until the next failing call.
//! Strings returned as `char *` are owned by the caller and released with
//! [`domlens_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use domlens::model::{GenerateOptions, ModelSpec, Prompt, ToyModel};
use domlens::sad;
use domlens::trace::{self, DecodeTrace, Grid};
use domlens::vdc::{self, SourceSet, VdcConfig, VdcOutcome};
use domlens::{Error, ModelConfig, Vocab};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomlensStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    OutOfRange = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomlensSource {
    LayerOnly = 0,
    AttnFfn = 1,
    AttnFfnLayer = 2,
}

impl From<DomlensSource> for SourceSet {
    fn from(s: DomlensSource) -> Self {
        match s {
            DomlensSource::LayerOnly => SourceSet::LayerOnly,
            DomlensSource::AttnFfn => SourceSet::AttnFfn,
            DomlensSource::AttnFfnLayer => SourceSet::AttnFfnLayer,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DomlensVdcConfig {
    pub validation: DomlensSource,
    pub correction: DomlensSource,
    pub skip_layers: u32,
    pub feedback: bool,
}

impl From<DomlensVdcConfig> for VdcConfig {
    fn from(c: DomlensVdcConfig) -> Self {
        VdcConfig {
            validation: c.validation.into(),
            correction: c.correction.into(),
            skip_layers: c.skip_layers as usize,
            feedback: c.feedback,
            ..Default::default()
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DomlensModelConfig {
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub num_heads: u32,
    pub ffn_dim: u32,
    pub vocab_size: u32,
    pub max_context: u32,
    pub grid_h: u32,
    pub grid_w: u32,
    pub tie_embeddings: bool,
}

/// Parameters of a generation call.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DomlensGenerateParams {
    /// Prompt token ids laid out as `[system | vision | instruction]`.
    pub prompt: *const u32,
    pub prompt_len: usize,
    pub system_len: usize,
    pub max_new: usize,
    pub topk: usize,
}

/// Opaque decode trace.
pub struct DomlensTrace(DecodeTrace);

/// Opaque toy decoder with its synthetic vocabulary.
pub struct DomlensModel {
    model: ToyModel,
    vocab: Vocab,
}

/// Opaque correction result.
pub struct DomlensCorrection(VdcOutcome);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> DomlensStatus {
    match e {
        Error::Io(_) => DomlensStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::UnsupportedVersion(_) => DomlensStatus::Parse,
        Error::Validation(_) => DomlensStatus::Validation,
        _ => DomlensStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DomlensStatus, String)>) -> DomlensStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DomlensStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DomlensStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (DomlensStatus, String)>;
}

impl<T> IntoFfi<T> for domlens::Result<T> {
    fn ffi(self) -> Result<T, (DomlensStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (DomlensStatus, String) {
    (DomlensStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn nonnull<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DomlensStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, (DomlensStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| (DomlensStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (DomlensStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until the next failure.
#[no_mangle]
pub extern "C" fn domlens_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn domlens_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Validation Attn+FFN, correction Attn+FFN+Layer, no skipped layers, feedback on.
#[no_mangle]
pub extern "C" fn domlens_vdc_config_default() -> DomlensVdcConfig {
    DomlensVdcConfig {
        validation: DomlensSource::AttnFfn,
        correction: DomlensSource::AttnFfnLayer,
        skip_layers: 0,
        feedback: true,
    }
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn domlens_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- traces ----

/// Reads and validates a JSON-lines trace file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_trace_read_file(
    path: *const c_char,
    out: *mut *mut DomlensTrace,
) -> DomlensStatus {
    guard(|| {
        let p = path_arg(path)?;
        let t = trace::read_trace_file(p).ffi()?;
        put(out, DomlensTrace(t))
    })
}

/// Parses a trace from an in-memory buffer of `len` bytes.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_trace_read_buffer(
    data: *const u8,
    len: usize,
    out: *mut *mut DomlensTrace,
) -> DomlensStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let t = trace::read_trace(bytes).ffi()?;
        put(out, DomlensTrace(t))
    })
}

/// # Safety
/// `trace` must be a valid handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn domlens_trace_write_file(
    trace: *const DomlensTrace,
    path: *const c_char,
) -> DomlensStatus {
    guard(|| {
        let t = nonnull(trace, "trace")?;
        let p = path_arg(path)?;
        trace::write_trace_file(&t.0, p).ffi()
    })
}

/// # Safety
/// `trace` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn domlens_trace_free(trace: *mut DomlensTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// # Safety
/// `trace` must be NULL or a valid handle.
#[no_mangle]
pub unsafe extern "C" fn domlens_trace_num_steps(trace: *const DomlensTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.steps.len())
}

/// # Safety
/// `trace` must be NULL or a valid handle.
#[no_mangle]
pub unsafe extern "C" fn domlens_trace_num_layers(trace: *const DomlensTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.num_layers)
}

/// Emitted token id of step `index` (0-based).
///
/// # Safety
/// `trace` must be a valid handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_trace_emitted_id(
    trace: *const DomlensTrace,
    index: usize,
    out: *mut u32,
) -> DomlensStatus {
    guard(|| {
        let t = nonnull(trace, "trace")?;
        let step = t.0.steps.get(index).ok_or((
            DomlensStatus::OutOfRange,
            format!("step {index} out of range"),
        ))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = step.emitted.token_id as u32;
        Ok(())
    })
}

/// Writes the number of invariant violations to `out` (0 means valid).
///
/// # Safety
/// `trace` must be a valid handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_trace_validate(
    trace: *const DomlensTrace,
    out: *mut usize,
) -> DomlensStatus {
    guard(|| {
        let t = nonnull(trace, "trace")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = trace::validate(&t.0).len();
        Ok(())
    })
}

/// Whether step `index` shows subdominant accumulation: its emitted token is
/// never rank-1 in the attention or FFN stream past `skip_layers`.
///
/// # Safety
/// `trace` must be a valid handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_trace_sad_flag(
    trace: *const DomlensTrace,
    index: usize,
    skip_layers: u32,
    out: *mut bool,
) -> DomlensStatus {
    guard(|| {
        let t = nonnull(trace, "trace")?;
        let step = t.0.steps.get(index).ok_or((
            DomlensStatus::OutOfRange,
            format!("step {index} out of range"),
        ))?;
        let r = sad::detect_sad(step, skip_layers as usize).ffi()?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = r.sad_flag;
        Ok(())
    })
}

// ---- models ----

/// Builds a deterministic toy decoder from `config` and `seed`.
///
/// # Safety
/// `config` must be readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_model_new(
    config: *const DomlensModelConfig,
    seed: u64,
    out: *mut *mut DomlensModel,
) -> DomlensStatus {
    guard(|| {
        let c = nonnull(config, "config")?;
        let cfg = ModelConfig {
            num_layers: c.num_layers as usize,
            hidden_dim: c.hidden_dim as usize,
            num_heads: c.num_heads as usize,
            ffn_dim: c.ffn_dim as usize,
            vocab_size: c.vocab_size as usize,
            max_context: c.max_context as usize,
            grid: Grid {
                h: c.grid_h as usize,
                w: c.grid_w as usize,
            },
            tie_embeddings: c.tie_embeddings,
        };
        let model = domlens::new_model(cfg, seed).ffi()?;
        let vocab = Vocab::synthetic(model.config.vocab_size);
        put(out, DomlensModel { model, vocab })
    })
}

/// Loads a model file written by `domlens model new`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_model_load(
    path: *const c_char,
    out: *mut *mut DomlensModel,
) -> DomlensStatus {
    guard(|| {
        let p = path_arg(path)?;
        let text = std::fs::read_to_string(p).map_err(|e| (DomlensStatus::Io, e.to_string()))?;
        let spec: ModelSpec =
            serde_json::from_str(&text).map_err(|e| (DomlensStatus::Parse, e.to_string()))?;
        let model = spec.build().ffi()?;
        let vocab = Vocab::synthetic(model.config.vocab_size);
        put(out, DomlensModel { model, vocab })
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn domlens_model_free(model: *mut DomlensModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Checksum over every weight; equal for equal `(config, seed)`.
///
/// # Safety
/// `model` must be NULL or a valid handle.
#[no_mangle]
pub unsafe extern "C" fn domlens_model_checksum(model: *const DomlensModel) -> u64 {
    model.as_ref().map_or(0, |m| m.model.checksum())
}

unsafe fn prompt_and_opts(
    m: &DomlensModel,
    params: *const DomlensGenerateParams,
) -> Result<(Prompt, GenerateOptions), (DomlensStatus, String)> {
    let p = nonnull(params, "params")?;
    if p.prompt.is_null() {
        return Err(null("params.prompt"));
    }
    let ids: Vec<usize> = std::slice::from_raw_parts(p.prompt, p.prompt_len)
        .iter()
        .map(|&x| x as usize)
        .collect();
    let vision = m.model.config.grid.cells();
    if ids.len() <= p.system_len + vision {
        return Err((
            DomlensStatus::InvalidArgument,
            format!(
                "prompt of {} tokens leaves no instruction segment",
                ids.len()
            ),
        ));
    }
    let (s, rest) = ids.split_at(p.system_len);
    let (v, i) = rest.split_at(vision);
    let opts = GenerateOptions {
        max_new: p.max_new,
        topk: p.topk,
        ..Default::default()
    };
    Ok((Prompt::from_parts(s, v, i), opts))
}

/// Greedy instrumented generation.
///
/// # Safety
/// `model` and `params` must be valid; `params.prompt` must point to
/// `params.prompt_len` ids; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_model_generate(
    model: *const DomlensModel,
    params: *const DomlensGenerateParams,
    out: *mut *mut DomlensTrace,
) -> DomlensStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let (prompt, opts) = prompt_and_opts(m, params)?;
        let t = domlens::generate(&m.model, &prompt, &opts, &m.vocab).ffi()?;
        put(out, DomlensTrace(t))
    })
}

/// Online decoding with correction. `out_trace` may be NULL when the trace is not needed.
///
/// # Safety
/// As for [`domlens_model_generate`]; `config` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_decode_vdc(
    model: *const DomlensModel,
    params: *const DomlensGenerateParams,
    config: *const DomlensVdcConfig,
    out_trace: *mut *mut DomlensTrace,
    out: *mut *mut DomlensCorrection,
) -> DomlensStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let cfg: VdcConfig = (*nonnull(config, "config")?).into();
        let (prompt, opts) = prompt_and_opts(m, params)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = vdc::decode_with_vdc(&m.model, &prompt, &m.vocab, &opts, &cfg).ffi()?;
        if !out_trace.is_null() {
            put(out_trace, DomlensTrace(d.trace))?;
        }
        put(out, DomlensCorrection(d.outcome))
    })
}

// ---- correction ----

/// Offline correction of every step of `trace`.
///
/// # Safety
/// `trace` and `config` must be valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_correct_trace(
    trace: *const DomlensTrace,
    config: *const DomlensVdcConfig,
    out: *mut *mut DomlensCorrection,
) -> DomlensStatus {
    guard(|| {
        let t = nonnull(trace, "trace")?;
        let cfg: VdcConfig = (*nonnull(config, "config")?).into();
        let r = vdc::correct_trace(&t.0, &cfg).ffi()?;
        put(out, DomlensCorrection(r))
    })
}

/// # Safety
/// `c` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn domlens_correction_free(c: *mut DomlensCorrection) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// # Safety
/// `c` must be NULL or a valid handle.
#[no_mangle]
pub unsafe extern "C" fn domlens_correction_len(c: *const DomlensCorrection) -> usize {
    c.as_ref().map_or(0, |c| c.0.corrected_ids.len())
}

/// # Safety
/// `c` must be NULL or a valid handle.
#[no_mangle]
pub unsafe extern "C" fn domlens_correction_num_replaced(c: *const DomlensCorrection) -> usize {
    c.as_ref().map_or(0, |c| c.0.num_replaced())
}

/// Corrected token id at `index` and whether it was replaced.
///
/// # Safety
/// `c` must be a valid handle; `token` writable; `replaced` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_correction_token(
    c: *const DomlensCorrection,
    index: usize,
    token: *mut u32,
    replaced: *mut bool,
) -> DomlensStatus {
    guard(|| {
        let c = nonnull(c, "correction")?;
        let r = c.0.reports.get(index).ok_or((
            DomlensStatus::OutOfRange,
            format!("index {index} out of range"),
        ))?;
        if token.is_null() {
            return Err(null("token"));
        }
        *token = r.output_id() as u32;
        if !replaced.is_null() {
            *replaced = r.replacement.is_some();
        }
        Ok(())
    })
}

/// Per-step reports as a JSON array. Release with [`domlens_string_free`].
///
/// # Safety
/// `c` must be a valid handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn domlens_correction_report_json(
    c: *const DomlensCorrection,
    out: *mut *mut c_char,
) -> DomlensStatus {
    guard(|| {
        let c = nonnull(c, "correction")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = domlens::report::vdc_reports_json(&c.0.reports).ffi()?;
        *out = CString::new(s)
            .map_err(|_| (DomlensStatus::InvalidArgument, "interior NUL".to_string()))?
            .into_raw();
        Ok(())
    })
}
