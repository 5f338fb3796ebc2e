//! C ABI over the `nlid` toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_new`-style
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`NlidStatus`]; the message of the most recent failure on the
//! calling thread is available from [`nlid_last_error`]. Panics are caught at
//! the boundary and reported as [`NlidStatus::Panic`].

use nlid::bench::{simulate_cell, SyntheticCell};
use nlid::cli::{identify, PipelineConfig};
use nlid::pnlss::PnlssModel;
use nlid::signals::{realizations, ExcitationSignal, MultisineSpec};
use nlid::spectral::{analyze_record, Behaviour, DistortionOptions, TimeRecord};
use nlid::trend::{detrend_record, l1_trend, lambda_max, LambdaPolicy, TrendOptions, TrendProblem};
use nlid::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result codes. Values 2 and 3 line up with the command-line exit codes
/// for configuration and numerical failures.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlidStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numerical = 3,
    Format = 4,
    InsufficientData = 5,
    Instability = 6,
    Io = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlidBehaviour {
    Linear = 0,
    Even = 1,
    Odd = 2,
    EvenDominant = 3,
    OddDominant = 4,
}

/// Pooled distortion levels in dB.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct NlidDistortionSummary {
    pub behaviour: i32,
    pub excited_db: f64,
    pub noise_db: f64,
    /// Odd detection power over noise; NaN when the grid has no such lines.
    pub odd_excess_db: f64,
    pub even_excess_db: f64,
}

/// Headline numbers of an identification run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct NlidIdentifySummary {
    pub n_b: usize,
    pub n_a: usize,
    pub states: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub linear_rms: f64,
    pub pnlss_rms: f64,
    pub ratio: f64,
}

/// Multisine realizations sharing one harmonic grid.
pub struct NlidMultisine {
    signals: Vec<ExcitationSignal>,
}

/// Periodic input/output record.
pub struct NlidRecord {
    record: TimeRecord,
}

/// Polynomial nonlinear state-space model.
pub struct NlidModel {
    model: PnlssModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NlidStatus {
    match e {
        Error::Config(_) => NlidStatus::Config,
        Error::Format(_) | Error::Csv(_) | Error::Json(_) => NlidStatus::Format,
        Error::InsufficientData(_) => NlidStatus::InsufficientData,
        Error::Numerical(_) => NlidStatus::Numerical,
        Error::Instability { .. } => NlidStatus::Instability,
        Error::Io { .. } => NlidStatus::Io,
    }
}

/// Runs `f` behind a panic guard and records any failure message.
fn guard(f: impl FnOnce() -> Result<(), (NlidStatus, String)>) -> NlidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NlidStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            NlidStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (NlidStatus, String)>;
}

impl<T> IntoFfi<T> for nlid::Result<T> {
    fn ffi(self) -> Result<T, (NlidStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (NlidStatus, String) {
    (NlidStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], (NlidStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (NlidStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, (NlidStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| (NlidStatus::Config, format!("{what} is not valid UTF-8")))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nlid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nlid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Designs `count` odd-random multisine realizations.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn nlid_multisine_new(
    fs: f64,
    n: usize,
    f_lo: f64,
    f_hi: f64,
    rms: f64,
    seed: u64,
    count: usize,
    out: *mut *mut NlidMultisine,
) -> NlidStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = MultisineSpec { fs, n, band: [f_lo, f_hi], target_rms: Some(rms), seed, ..MultisineSpec::default() };
        let signals = realizations(&spec, count).ffi()?;
        *out = Box::into_raw(Box::new(NlidMultisine { signals }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`nlid_multisine_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nlid_multisine_free(h: *mut NlidMultisine) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of realizations in the handle, 0 for NULL.
///
/// # Safety
/// `h` must be NULL or a live multisine handle.
#[no_mangle]
pub unsafe extern "C" fn nlid_multisine_count(h: *const NlidMultisine) -> usize {
    h.as_ref().map_or(0, |m| m.signals.len())
}

/// Samples per period, 0 for NULL.
///
/// # Safety
/// `h` must be NULL or a live multisine handle.
#[no_mangle]
pub unsafe extern "C" fn nlid_multisine_period(h: *const NlidMultisine) -> usize {
    h.as_ref().and_then(|m| m.signals.first()).map_or(0, |s| s.samples.len())
}

/// Number of excited lines, 0 for NULL.
///
/// # Safety
/// `h` must be NULL or a live multisine handle.
#[no_mangle]
pub unsafe extern "C" fn nlid_multisine_excited_count(h: *const NlidMultisine) -> usize {
    h.as_ref().and_then(|m| m.signals.first()).map_or(0, |s| s.grid.excited.len())
}

/// Copies one period of realization `index` into `buf` (length `len` must equal the period).
///
/// # Safety
/// `h` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn nlid_multisine_samples(h: *const NlidMultisine, index: usize, buf: *mut f64, len: usize) -> NlidStatus {
    guard(|| {
        let m = h.as_ref().ok_or_else(|| null("multisine"))?;
        let sig = m.signals.get(index).ok_or((NlidStatus::Config, format!("realization {index} out of range")))?;
        if len != sig.samples.len() {
            return Err((NlidStatus::Config, format!("buffer holds {len} samples, period is {}", sig.samples.len())));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(&sig.samples);
        Ok(())
    })
}

/// Wraps input/output samples laid out realization-major, `realizations * periods * n` each.
///
/// # Safety
/// `u` and `y` must be valid for `len` reads; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nlid_record_new(
    u: *const f64,
    y: *const f64,
    len: usize,
    fs: f64,
    n: usize,
    periods: usize,
    realizations: usize,
    out: *mut *mut NlidRecord,
) -> NlidStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let record =
            TimeRecord { u: slice(u, len, "u")?.to_vec(), y: slice(y, len, "y")?.to_vec(), fs, n, periods, realizations };
        record.validate().ffi()?;
        *out = Box::into_raw(Box::new(NlidRecord { record }));
        Ok(())
    })
}

/// Simulates a synthetic cell preset (`soc10`, `soc90`, `cubic`, `quadratic`, `fir`)
/// driven by every realization of `ms`.
///
/// # Safety
/// `ms` must be a live handle, `preset` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nlid_simulate_cell(
    ms: *const NlidMultisine,
    preset: *const c_char,
    periods: usize,
    seed: u64,
    out: *mut *mut NlidRecord,
) -> NlidStatus {
    guard(|| {
        let m = ms.as_ref().ok_or_else(|| null("multisine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cell = SyntheticCell { seed, ..SyntheticCell::preset(text(preset, "preset")?).ffi()? };
        let record = simulate_cell(&cell, &m.signals, periods).ffi()?;
        *out = Box::into_raw(Box::new(NlidRecord { record }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from a record constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nlid_record_free(h: *mut NlidRecord) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Total samples per channel, 0 for NULL.
///
/// # Safety
/// `h` must be NULL or a live record handle.
#[no_mangle]
pub unsafe extern "C" fn nlid_record_len(h: *const NlidRecord) -> usize {
    h.as_ref().map_or(0, |r| r.record.y.len())
}

/// Copies the output channel into `buf`.
///
/// # Safety
/// `h` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn nlid_record_output(h: *const NlidRecord, buf: *mut f64, len: usize) -> NlidStatus {
    guard(|| {
        let r = h.as_ref().ok_or_else(|| null("record"))?;
        if len != r.record.y.len() {
            return Err((NlidStatus::Config, format!("buffer holds {len} samples, record has {}", r.record.y.len())));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(&r.record.y);
        Ok(())
    })
}

/// Even/odd distortion analysis of `rec` on the grid of `ms`, skipping one
/// transient period and using a 6 dB significance margin. The output is
/// first detrended with weight `trend_fraction * lambda_max` per realization
/// (0 disables detrending).
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nlid_analyze(
    rec: *const NlidRecord,
    ms: *const NlidMultisine,
    trend_fraction: f64,
    out: *mut NlidDistortionSummary,
) -> NlidStatus {
    guard(|| {
        let r = rec.as_ref().ok_or_else(|| null("record"))?;
        let grid = &ms.as_ref().and_then(|m| m.signals.first()).ok_or_else(|| null("multisine"))?.grid;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if !(trend_fraction >= 0.0 && trend_fraction.is_finite()) {
            return Err((NlidStatus::Config, format!("trend_fraction {trend_fraction} must be finite and >= 0")));
        }
        let detrended;
        let data = if trend_fraction > 0.0 {
            detrended = detrend_record(&r.record, LambdaPolicy::FractionOfMax(trend_fraction)).ffi()?.record;
            &detrended
        } else {
            &r.record
        };
        let rep = analyze_record(data, grid, &DistortionOptions::default()).ffi()?;
        let p = &rep.pooled;
        *out = NlidDistortionSummary {
            behaviour: match rep.behaviour() {
                Behaviour::Linear => NlidBehaviour::Linear,
                Behaviour::Even => NlidBehaviour::Even,
                Behaviour::Odd => NlidBehaviour::Odd,
                Behaviour::EvenDominant => NlidBehaviour::EvenDominant,
                Behaviour::OddDominant => NlidBehaviour::OddDominant,
            } as i32,
            excited_db: p.excited.mean_power_db,
            noise_db: p.excited.mean_noise_db,
            odd_excess_db: p.odd_detect.as_ref().map_or(f64::NAN, |c| c.excess_db),
            even_excess_db: p.even_detect.as_ref().map_or(f64::NAN, |c| c.excess_db),
        };
        Ok(())
    })
}

/// l1 trend of `y` with weight `fraction * lambda_max`; writes the trend into `m`.
///
/// # Safety
/// `y` must be valid for `len` reads and `m` for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn nlid_l1_trend(y: *const f64, len: usize, fraction: f64, m: *mut f64) -> NlidStatus {
    guard(|| {
        let y = slice(y, len, "y")?;
        let out = slice_mut(m, len, "m")?;
        if !(fraction >= 0.0 && fraction.is_finite()) {
            return Err((NlidStatus::Config, format!("fraction {fraction} must be finite and >= 0")));
        }
        let lambda = fraction * lambda_max(y).ffi()?;
        let res = l1_trend(&TrendProblem { y, lambda }, &TrendOptions::for_data(y)).ffi()?;
        out.copy_from_slice(&res.m);
        Ok(())
    })
}

/// Full identification pipeline on `rec` with the grid of `ms`. `config_toml`
/// may be NULL for defaults; otherwise it holds a TOML pipeline configuration.
///
/// # Safety
/// Handles must be live; `out_model` and `summary` must be writable
/// (`summary` may be NULL).
#[no_mangle]
pub unsafe extern "C" fn nlid_identify(
    rec: *const NlidRecord,
    ms: *const NlidMultisine,
    config_toml: *const c_char,
    out_model: *mut *mut NlidModel,
    summary: *mut NlidIdentifySummary,
) -> NlidStatus {
    guard(|| {
        let r = rec.as_ref().ok_or_else(|| null("record"))?;
        let grid = &ms.as_ref().and_then(|m| m.signals.first()).ok_or_else(|| null("multisine"))?.grid;
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        let cfg = if config_toml.is_null() {
            PipelineConfig { periods: r.record.periods, ..PipelineConfig::default() }
        } else {
            PipelineConfig::from_toml(text(config_toml, "config_toml")?).ffi()?
        };
        let id = identify(&r.record, grid, &cfg).ffi()?;
        if let Some(s) = summary.as_mut() {
            *s = NlidIdentifySummary {
                n_b: id.mdl.n_b,
                n_a: id.mdl.n_a,
                states: id.pnlss.n_x(),
                initial_cost: id.fit.initial_cost,
                final_cost: id.fit.final_cost,
                linear_rms: id.comparison.linear_rms,
                pnlss_rms: id.comparison.pnlss_rms,
                ratio: id.comparison.ratio,
            };
        }
        *out_model = Box::into_raw(Box::new(NlidModel { model: id.pnlss }));
        Ok(())
    })
}

/// Loads a model JSON written by the `identify` command.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nlid_model_load(path: *const c_char, out: *mut *mut NlidModel) -> NlidStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = PnlssModel::read_json(Path::new(text(path, "path")?)).ffi()?;
        *out = Box::into_raw(Box::new(NlidModel { model }));
        Ok(())
    })
}

/// Writes the model as JSON.
///
/// # Safety
/// `h` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn nlid_model_save(h: *const NlidModel, path: *const c_char) -> NlidStatus {
    guard(|| {
        let m = h.as_ref().ok_or_else(|| null("model"))?;
        m.model.write_json(Path::new(text(path, "path")?), serde_json::Value::Null).ffi()
    })
}

/// Number of states, 0 for NULL.
///
/// # Safety
/// `h` must be NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn nlid_model_states(h: *const NlidModel) -> usize {
    h.as_ref().map_or(0, |m| m.model.n_x())
}

/// Simulates the model from rest; `u` and `y` both hold `len` samples.
///
/// # Safety
/// `h` must be live, `u` valid for `len` reads and `y` for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn nlid_model_simulate(h: *const NlidModel, u: *const f64, y: *mut f64, len: usize) -> NlidStatus {
    guard(|| {
        let m = h.as_ref().ok_or_else(|| null("model"))?;
        let u = slice(u, len, "u")?;
        let out = slice_mut(y, len, "y")?;
        let sim = m.model.simulate(u, None).ffi()?;
        out.copy_from_slice(&sim.y);
        Ok(())
    })
}

/// # Safety
/// `h` must come from a model constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nlid_model_free(h: *mut NlidModel) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
