//! C ABI over the `gss` engine.
//!
//! Every fallible call returns a [`GssStatus`]; on failure the message is
//! available from [`gss_last_error_message`] on the same thread until the
//! next failing call. Handles are opaque and must be released with their
//! `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gss::config::{BatchMode, EnhanceConfig};
use gss::manifests::{load_recordings, load_segments, AudioSource, Recording, Segment, SegmentFormat};
use gss::scheduler::{run_pipeline, run_with, EnhancedSegment, MemoryAudio, MemorySink};
use gss::Error;
use ndarray::Array2;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GssStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Validation = 6,
    Numerical = 7,
    Pipeline = 8,
    Panic = 9,
}

impl From<&Error> for GssStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Spec(_) => GssStatus::Config,
            Error::Io { .. } | Error::Wav { .. } => GssStatus::Io,
            Error::Parse { .. } | Error::Json(_) => GssStatus::Parse,
            Error::Validation(_) | Error::Shape(_) | Error::InputTooShort { .. } | Error::EmptyTarget { .. } => {
                GssStatus::Validation
            }
            Error::Singular { .. } | Error::DegenerateStats => GssStatus::Numerical,
            Error::Pipeline(_) => GssStatus::Pipeline,
        }
    }
}

/// Opaque enhancement configuration.
pub struct GssConfig {
    inner: EnhanceConfig,
}

/// Opaque in-memory enhancement result.
pub struct GssEnhanceResult {
    outputs: Vec<EnhancedSegment>,
    ids: Vec<CString>,
    failed: usize,
}

/// Counters of a finished run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct GssRunStats {
    pub segments_total: usize,
    pub segments_succeeded: usize,
    pub segments_failed: usize,
    pub wall_seconds: f64,
    pub real_time_factor: f64,
}

/// One target segment of an in-memory recording.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct GssSegment {
    /// NUL-terminated speaker label.
    pub speaker: *const c_char,
    pub start: f64,
    pub duration: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: GssStatus, msg: impl Into<String>) -> GssStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> GssStatus {
    fail(GssStatus::from(&e), e.to_string())
}

fn guard(f: impl FnOnce() -> GssStatus) -> GssStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(GssStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, GssStatus> {
    if p.is_null() {
        return Err(fail(GssStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GssStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New configuration with default values. Never null.
#[no_mangle]
pub extern "C" fn gss_config_new() -> *mut GssConfig {
    Box::into_raw(Box::new(GssConfig { inner: EnhanceConfig::default() }))
}

/// Configuration parsed from a JSON object with every field of the
/// enhancement config.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gss_config_from_json(json: *const c_char, out: *mut *mut GssConfig) -> GssStatus {
    guard(|| {
        if out.is_null() {
            return fail(GssStatus::NullPointer, "out is null");
        }
        let text = tri!(str_arg(json, "json"));
        let cfg: EnhanceConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(GssStatus::Parse, e.to_string()),
        };
        if let Err(e) = cfg.validate() {
            return from_error(e);
        }
        *out = Box::into_raw(Box::new(GssConfig { inner: cfg }));
        GssStatus::Ok
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn gss_config_free(cfg: *mut GssConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

unsafe fn config_mut<'a>(cfg: *mut GssConfig) -> Result<&'a mut EnhanceConfig, GssStatus> {
    cfg.as_mut()
        .map(|c| &mut c.inner)
        .ok_or_else(|| fail(GssStatus::NullPointer, "config is null"))
}

fn positive(v: f64, what: &str) -> Result<f64, GssStatus> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(fail(GssStatus::InvalidArgument, format!("{what} must be positive")))
    }
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gss_config_set_max_batch_duration(cfg: *mut GssConfig, seconds: f64) -> GssStatus {
    let c = tri!(config_mut(cfg));
    c.max_batch_duration = tri!(positive(seconds, "max batch duration"));
    GssStatus::Ok
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gss_config_set_context_duration(cfg: *mut GssConfig, seconds: f64) -> GssStatus {
    let c = tri!(config_mut(cfg));
    if !(seconds >= 0.0 && seconds.is_finite()) {
        return fail(GssStatus::InvalidArgument, "context duration must be non-negative");
    }
    c.context_duration = seconds;
    GssStatus::Ok
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gss_config_set_bss_iterations(cfg: *mut GssConfig, iterations: u32) -> GssStatus {
    let c = tri!(config_mut(cfg));
    if iterations == 0 {
        return fail(GssStatus::InvalidArgument, "bss iterations must be at least 1");
    }
    c.bss.iterations = iterations as usize;
    GssStatus::Ok
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gss_config_set_use_wpe(cfg: *mut GssConfig, enabled: bool) -> GssStatus {
    tri!(config_mut(cfg)).use_wpe = enabled;
    GssStatus::Ok
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gss_config_set_noise_class(cfg: *mut GssConfig, enabled: bool) -> GssStatus {
    tri!(config_mut(cfg)).noise_class = enabled;
    GssStatus::Ok
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gss_config_set_one_per_batch(cfg: *mut GssConfig, enabled: bool) -> GssStatus {
    tri!(config_mut(cfg)).mode = if enabled { BatchMode::OnePerBatch } else { BatchMode::SuperSegment };
    GssStatus::Ok
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gss_config_set_workers(cfg: *mut GssConfig, workers: u32) -> GssStatus {
    tri!(config_mut(cfg)).workers = workers as usize;
    GssStatus::Ok
}

/// Restricts processing to `len` channel indices; `len == 0` selects all.
///
/// # Safety
/// `cfg` must be a live handle and `channels` point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn gss_config_set_channels(cfg: *mut GssConfig, channels: *const u32, len: usize) -> GssStatus {
    let c = tri!(config_mut(cfg));
    if len == 0 {
        c.channels = None;
        return GssStatus::Ok;
    }
    if channels.is_null() {
        return fail(GssStatus::NullPointer, "channels is null");
    }
    let sel: Vec<usize> = std::slice::from_raw_parts(channels, len).iter().map(|&v| v as usize).collect();
    let mut check = c.clone();
    check.channels = Some(sel.clone());
    if let Err(e) = check.validate() {
        return from_error(e);
    }
    c.channels = Some(sel);
    GssStatus::Ok
}

/// Runs the file-based pipeline: WAVs and `summary.json` go to `out_dir`.
/// Returns `Ok` even if some segments failed; check `stats`.
///
/// # Safety
/// Strings must be NUL-terminated; `stats` may be null.
#[no_mangle]
pub unsafe extern "C" fn gss_run_pipeline(
    cfg: *const GssConfig,
    recordings_path: *const c_char,
    segments_path: *const c_char,
    out_dir: *const c_char,
    stats: *mut GssRunStats,
) -> GssStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(GssStatus::NullPointer, "config is null");
        };
        let rec_path = PathBuf::from(tri!(str_arg(recordings_path, "recordings path")));
        let seg_path = PathBuf::from(tri!(str_arg(segments_path, "segments path")));
        let out = PathBuf::from(tri!(str_arg(out_dir, "output directory")));
        let run = || -> gss::Result<GssRunStats> {
            let recordings = load_recordings(&rec_path)?;
            let segments = load_segments(&seg_path, SegmentFormat::from_path(&seg_path))?.segments;
            let s = run_pipeline(&recordings, &segments, &cfg.inner, &out)?;
            Ok(GssRunStats {
                segments_total: s.segments_total,
                segments_succeeded: s.segments_succeeded,
                segments_failed: s.segments_failed,
                wall_seconds: s.runtime.wall_seconds,
                real_time_factor: s.runtime.real_time_factor,
            })
        };
        match run() {
            Ok(s) => {
                if let Some(out) = stats.as_mut() {
                    *out = s;
                }
                GssStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Enhances segments of one in-memory recording. `audio` holds `channels`
/// rows of `num_samples` samples each (channel-major). Segment times are in
/// seconds. On success `*out` receives a result handle with one output per
/// successfully enhanced segment, ordered by segment id.
///
/// # Safety
/// `audio` must point to `channels * num_samples` values, `segments` to
/// `num_segments` entries with valid speaker strings, `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gss_enhance(
    cfg: *const GssConfig,
    audio: *const f64,
    channels: usize,
    num_samples: usize,
    sample_rate: u32,
    segments: *const GssSegment,
    num_segments: usize,
    out: *mut *mut GssEnhanceResult,
) -> GssStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(GssStatus::NullPointer, "config is null");
        };
        if out.is_null() || audio.is_null() || (segments.is_null() && num_segments > 0) {
            return fail(GssStatus::NullPointer, "null buffer");
        }
        if channels == 0 || num_samples == 0 || sample_rate == 0 {
            return fail(GssStatus::InvalidArgument, "empty audio or zero sample rate");
        }
        let Some(total) = channels.checked_mul(num_samples) else {
            return fail(GssStatus::InvalidArgument, "audio size overflows");
        };
        let data = std::slice::from_raw_parts(audio, total).to_vec();
        let signal = Array2::from_shape_vec((channels, num_samples), data).expect("length checked");
        let rec_id = "memory";
        let recording = Recording {
            id: rec_id.into(),
            sources: vec![AudioSource { path: PathBuf::new(), channels: (0..channels).collect() }],
            sample_rate,
            duration: num_samples as f64 / sample_rate as f64,
        };
        let mut segs = Vec::with_capacity(num_segments);
        for s in std::slice::from_raw_parts(segments, num_segments) {
            let speaker = tri!(str_arg(s.speaker, "segment speaker")).to_string();
            segs.push(Segment {
                id: Segment::canonical_id(rec_id, &speaker, s.start, s.duration),
                recording_id: rec_id.into(),
                speaker,
                start: s.start,
                duration: s.duration,
            });
        }
        let provider = MemoryAudio { signals: HashMap::from([(rec_id.to_string(), signal)]) };
        let mut sink = MemorySink::default();
        let summary = match run_with(&[recording], &segs, &cfg.inner, &provider, &mut sink) {
            Ok(s) => s,
            Err(e) => return from_error(e),
        };
        let mut outputs = sink.outputs;
        outputs.sort_by(|a, b| a.segment.id.cmp(&b.segment.id));
        let ids = outputs
            .iter()
            .map(|o| CString::new(o.segment.id.replace('\0', " ")).expect("no interior NUL"))
            .collect();
        *out = Box::into_raw(Box::new(GssEnhanceResult {
            outputs,
            ids,
            failed: summary.segments_failed,
        }));
        GssStatus::Ok
    })
}

/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gss_result_count(result: *const GssEnhanceResult) -> usize {
    result.as_ref().map_or(0, |r| r.outputs.len())
}

/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gss_result_failed(result: *const GssEnhanceResult) -> usize {
    result.as_ref().map_or(0, |r| r.failed)
}

/// Borrowed samples of output `index`; valid until the result is freed.
///
/// # Safety
/// `result` must be a live handle; `samples` and `len` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gss_result_samples(
    result: *const GssEnhanceResult,
    index: usize,
    samples: *mut *const f64,
    len: *mut usize,
) -> GssStatus {
    let Some(r) = result.as_ref() else {
        return fail(GssStatus::NullPointer, "result is null");
    };
    if samples.is_null() || len.is_null() {
        return fail(GssStatus::NullPointer, "output pointer is null");
    }
    let Some(o) = r.outputs.get(index) else {
        return fail(GssStatus::InvalidArgument, format!("index {index} out of range"));
    };
    *samples = o.samples.as_ptr();
    *len = o.samples.len();
    GssStatus::Ok
}

/// Borrowed segment id of output `index`, or null when out of range.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gss_result_segment_id(result: *const GssEnhanceResult, index: usize) -> *const c_char {
    result
        .as_ref()
        .and_then(|r| r.ids.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// # Safety
/// `result` must come from [`gss_enhance`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gss_result_free(result: *mut GssEnhanceResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Scale-invariant SDR in dB of `estimate` against `reference`, over the
/// common length.
///
/// # Safety
/// Buffers must hold the given number of samples; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gss_si_sdr(
    estimate: *const f64,
    estimate_len: usize,
    reference: *const f64,
    reference_len: usize,
    out: *mut f64,
) -> GssStatus {
    guard(|| {
        if estimate.is_null() || reference.is_null() || out.is_null() {
            return fail(GssStatus::NullPointer, "null buffer");
        }
        let est = std::slice::from_raw_parts(estimate, estimate_len);
        let r = std::slice::from_raw_parts(reference, reference_len);
        match gss::synthbench::si_sdr(est, r) {
            Ok(v) => {
                *out = v;
                GssStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
