//! C ABI over the `reta` engine.
//!
//! Handles are opaque pointers created by `*_new` functions and released by
//! the matching `*_free`. Every fallible call returns a [`RetaStatus`]; on
//! failure a description is available from [`reta_last_error`] on the same
//! thread until the next failing call.
//!
//! Embeddings cross the boundary as row-major `float` arrays. They are
//! L2-normalized on the way in.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use reta::io::{read_dataset, RunConfig};
use reta::metrics::expected_calibration_error;
use reta::numeric::Embedding;
use reta::pipeline::{run_stream_with, Engine, SampleRecord};
use reta::textspace::PromptSet;
use reta::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dataset = 4,
    Numeric = 5,
    Io = 6,
    Panic = 7,
}

/// Run configuration handle.
pub struct RetaConfig {
    inner: RunConfig,
}

/// Streaming engine handle. Not thread-safe; use one handle per thread.
pub struct RetaEngine {
    inner: Engine,
    classes: usize,
    dim: usize,
    next_id: u64,
}

/// Outcome of one adapted sample.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RetaPrediction {
    pub predicted: u32,
    pub zero_shot: u32,
    /// Label given by the current text classifier before adaptation.
    pub pseudo_label: u32,
    /// Committee majority label.
    pub majority_label: u32,
    /// Max fused score divided by `1 + eta`.
    pub confidence: f64,
    /// Consistency weight, at least 1.
    pub weight: f64,
    pub entropy: f64,
    pub reweighted_entropy: f64,
    pub update: bool,
    pub merge: bool,
}

/// Aggregate metrics of a dataset run. Rates are fractions in `[0, 1]` and
/// NaN when undefined (no labels, empty cache).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RetaRunSummary {
    pub samples: u64,
    pub labeled: u64,
    pub top1_accuracy: f64,
    pub zero_shot_accuracy: f64,
    pub ece: f64,
    pub cache_purity: f64,
    pub updates: u64,
    pub merges: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

struct Failure(RetaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. }
            | Error::InvalidSpec(_)
            | Error::InvalidGamma(_)
            | Error::InvalidM { .. }
            | Error::InvalidTemperature(_)
            | Error::RankTooLarge { .. }
            | Error::TooFewPrompts { .. } => RetaStatus::Config,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::TruncatedPayload { .. }
            | Error::HeaderPayloadMismatch(_)
            | Error::Dataset(_)
            | Error::MalformedLog { .. } => RetaStatus::Dataset,
            Error::DimensionMismatch { .. }
            | Error::InvalidClass { .. }
            | Error::SingleClass(_)
            | Error::NoLabels
            | Error::EmptyCommittee => RetaStatus::InvalidArgument,
            Error::Io(_) => RetaStatus::Io,
            _ => RetaStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(RetaStatus::InvalidArgument, message.into())
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> RetaStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => RetaStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RetaStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(RetaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(RetaStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(RetaStatus::NullPointer, format!("{what} is null")))
}

fn embedding(values: &[f32]) -> Result<Embedding, Failure> {
    Ok(Embedding::normalized(values.iter().map(|&x| f64::from(x)).collect())?)
}

fn nan_if_none(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn reta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn reta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// New configuration with default values. Never NULL.
#[no_mangle]
pub extern "C" fn reta_config_new() -> *mut RetaConfig {
    Box::into_raw(Box::new(RetaConfig {
        inner: RunConfig::default(),
    }))
}

/// Reads a TOML configuration file over the defaults.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reta_config_from_toml(path: *const c_char, out: *mut *mut RetaConfig) -> RetaStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(RetaStatus::NullPointer, "out is null".into()));
        }
        let path = text(path, "path")?;
        let inner = RunConfig::from_toml_file(Path::new(path))?;
        *out = Box::into_raw(Box::new(RetaConfig { inner }));
        Ok(())
    })
}

/// Sets one key from its string form. The configuration is left unchanged
/// if the key is unknown or the resulting configuration is invalid.
///
/// # Safety
/// `config` must come from this library; `key` and `value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn reta_config_set(config: *mut RetaConfig, key: *const c_char, value: *const c_char) -> RetaStatus {
    guard(|| {
        let config = config
            .as_mut()
            .ok_or_else(|| Failure(RetaStatus::NullPointer, "config is null".into()))?;
        let (key, value) = (text(key, "key")?, text(value, "value")?);
        let mut next = config.inner.clone();
        next.set(key, value)?;
        next.validate()?;
        config.inner = next;
        Ok(())
    })
}

/// Serializes the configuration as TOML into `buffer`. `written` receives
/// the length without the terminating NUL; if `capacity` is too small the
/// call fails with `RETA_STATUS_INVALID_ARGUMENT` and `written` holds the
/// required length.
///
/// # Safety
/// `config` must come from this library; `buffer` must have room for
/// `capacity` bytes; `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn reta_config_to_toml(
    config: *const RetaConfig,
    buffer: *mut c_char,
    capacity: usize,
    written: *mut usize,
) -> RetaStatus {
    guard(|| {
        let config = handle(config, "config")?;
        if written.is_null() {
            return Err(Failure(RetaStatus::NullPointer, "written is null".into()));
        }
        let toml = config.inner.to_toml();
        *written = toml.len();
        if buffer.is_null() || capacity <= toml.len() {
            return Err(invalid(format!("buffer needs {} bytes", toml.len() + 1)));
        }
        ptr::copy_nonoverlapping(toml.as_ptr(), buffer.cast(), toml.len());
        *buffer.add(toml.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library or be NULL, and is invalid after
/// the call.
#[no_mangle]
pub unsafe extern "C" fn reta_config_free(config: *mut RetaConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Builds an engine from `classes * prompts_per_class` prompt embeddings of
/// length `dim`, class-major.
///
/// # Safety
/// `config` must come from this library; `prompts` must hold
/// `classes * prompts_per_class * dim` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn reta_engine_new(
    config: *const RetaConfig,
    prompts: *const f32,
    classes: usize,
    prompts_per_class: usize,
    dim: usize,
    out: *mut *mut RetaEngine,
) -> RetaStatus {
    guard(|| {
        let config = handle(config, "config")?;
        if out.is_null() {
            return Err(Failure(RetaStatus::NullPointer, "out is null".into()));
        }
        if classes == 0 || prompts_per_class == 0 || dim == 0 {
            return Err(invalid("classes, prompts_per_class and dim must be positive"));
        }
        let total = classes
            .checked_mul(prompts_per_class)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| invalid("prompt array size overflows"))?;
        let values = slice(prompts, total, "prompts")?;
        let per_class = values
            .chunks(prompts_per_class * dim)
            .map(|class| class.chunks(dim).map(embedding).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let prompts = PromptSet::new(per_class)?;
        let inner = Engine::new(&prompts, &config.inner)?;
        *out = Box::into_raw(Box::new(RetaEngine {
            inner,
            classes,
            dim,
            next_id: 0,
        }));
        Ok(())
    })
}

/// Adapts on one sample: `num_views` embeddings of the engine's dimension,
/// original view first. `label` is the ground truth or -1 when unknown; it
/// only feeds the purity metric. When `scores` is not NULL it receives the
/// fused class scores and must hold `scores_len >= classes` doubles.
///
/// # Safety
/// `engine` must come from this library; `views` must hold
/// `num_views * dim` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn reta_engine_adapt(
    engine: *mut RetaEngine,
    views: *const f32,
    num_views: usize,
    label: i64,
    out: *mut RetaPrediction,
    scores: *mut f64,
    scores_len: usize,
) -> RetaStatus {
    guard(|| {
        let engine = engine
            .as_mut()
            .ok_or_else(|| Failure(RetaStatus::NullPointer, "engine is null".into()))?;
        if out.is_null() {
            return Err(Failure(RetaStatus::NullPointer, "out is null".into()));
        }
        if num_views == 0 {
            return Err(invalid("at least one view is required"));
        }
        if !scores.is_null() && scores_len < engine.classes {
            return Err(invalid(format!("scores needs {} entries", engine.classes)));
        }
        let label = match label {
            -1 => None,
            l if l >= 0 && (l as u64) < engine.classes as u64 => Some(l as usize),
            l => return Err(invalid(format!("label {l} out of range for {} classes", engine.classes))),
        };
        let values = slice(views, num_views * engine.dim, "views")?;
        let views = values.chunks(engine.dim).map(embedding).collect::<Result<Vec<_>, _>>()?;
        let id = engine.next_id;
        let outcome = engine.inner.adapt_sample(&SampleRecord { id, views, label })?;
        engine.next_id += 1;
        let log = &outcome.log;
        *out = RetaPrediction {
            predicted: log.predicted as u32,
            zero_shot: log.zero_shot as u32,
            pseudo_label: log.y as u32,
            majority_label: log.y_star as u32,
            confidence: log.confidence,
            weight: log.w,
            entropy: log.entropy,
            reweighted_entropy: log.reweighted_entropy,
            update: log.update,
            merge: log.merge,
        };
        if !scores.is_null() {
            ptr::copy_nonoverlapping(outcome.scores.as_ptr(), scores, engine.classes);
        }
        Ok(())
    })
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `engine` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn reta_engine_classes(engine: *const RetaEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.classes)
}

/// Fraction of cached entries whose pseudo-label matches the given label;
/// NaN when no cached entry carries a label.
///
/// # Safety
/// `engine` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn reta_engine_cache_purity(engine: *const RetaEngine, out: *mut f64) -> RetaStatus {
    guard(|| {
        let engine = handle(engine, "engine")?;
        if out.is_null() {
            return Err(Failure(RetaStatus::NullPointer, "out is null".into()));
        }
        *out = nan_if_none(engine.inner.cache().purity());
        Ok(())
    })
}

/// # Safety
/// `engine` must come from this library or be NULL, and is invalid after
/// the call.
#[no_mangle]
pub unsafe extern "C" fn reta_engine_free(engine: *mut RetaEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Streams a dataset file through a fresh engine. When `log_path` is not
/// NULL the per-sample prediction log is written there as JSON lines.
///
/// # Safety
/// `dataset_path` and `log_path` (if not NULL) must be NUL-terminated;
/// `config` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn reta_run_dataset(
    dataset_path: *const c_char,
    config: *const RetaConfig,
    log_path: *const c_char,
    out: *mut RetaRunSummary,
) -> RetaStatus {
    guard(|| {
        let config = handle(config, "config")?;
        if out.is_null() {
            return Err(Failure(RetaStatus::NullPointer, "out is null".into()));
        }
        let path = text(dataset_path, "dataset_path")?;
        let mut log = if log_path.is_null() {
            None
        } else {
            let file = std::fs::File::create(text(log_path, "log_path")?).map_err(Error::from)?;
            Some(std::io::BufWriter::new(file))
        };
        let reader = read_dataset(Path::new(path))?;
        let prompts = reader.prompts().clone();
        let mut write_error = None;
        let run = run_stream_with(&prompts, reader, &config.inner, |record| {
            if let (Some(w), None) = (log.as_mut(), write_error.as_ref()) {
                let line = serde_json::to_string(record).expect("log records serialize");
                if let Err(e) = writeln!(w, "{line}") {
                    write_error = Some(e);
                }
            }
        })?;
        if let Some(e) = write_error {
            return Err(Error::from(e).into());
        }
        if let Some(mut w) = log {
            w.flush().map_err(Error::from)?;
        }
        let m = &run.metrics;
        *out = RetaRunSummary {
            samples: m.samples as u64,
            labeled: m.labeled as u64,
            top1_accuracy: nan_if_none(m.top1_accuracy),
            zero_shot_accuracy: nan_if_none(m.zero_shot_accuracy),
            ece: nan_if_none(m.ece),
            cache_purity: nan_if_none(m.final_cache_purity),
            updates: m.updates as u64,
            merges: m.merges as u64,
        };
        Ok(())
    })
}

/// Expected calibration error over `bins` equal-width bins.
///
/// # Safety
/// `confidences` and `correct` must each hold `n` elements; `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn reta_ece(
    confidences: *const f64,
    correct: *const bool,
    n: usize,
    bins: usize,
    out: *mut f64,
) -> RetaStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(RetaStatus::NullPointer, "out is null".into()));
        }
        let conf = slice(confidences, n, "confidences")?;
        let ok = slice(correct, n, "correct")?;
        *out = expected_calibration_error(conf, ok, bins)?;
        Ok(())
    })
}
