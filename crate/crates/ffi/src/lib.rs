//! C ABI over the ev3 library.
//!
//! Configs and results are opaque handles owned by the caller and released
//! with their `_free` function. Strings returned through out-pointers are
//! released with [`ev3_string_free`]. Every fallible call returns an
//! [`Ev3Status`]; the message for the most recent failure on the calling
//! thread is available from [`ev3_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ev3::config::ExperimentConfig;
use ev3::harness::{
    emit_results, render_pareto_csv, render_summary, render_trace_csv, run_experiment, Experiment,
    ExperimentResults, Regime,
};
use ev3::model::{param_count, GraphSpec};
use ev3::stats::z_test_counts;
use ev3::Ev3Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ev3Status {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Calibration = 4,
    Data = 5,
    Io = 6,
    Contract = 7,
    Panic = 8,
}

/// Opaque experiment configuration.
pub struct Ev3Config {
    inner: ExperimentConfig,
}

/// Opaque results of a finished experiment.
pub struct Ev3Results {
    inner: ExperimentResults,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(Ev3Status, String);

impl From<Ev3Error> for Failure {
    fn from(e: Ev3Error) -> Self {
        let status = match &e {
            Ev3Error::Config(_) | Ev3Error::UnknownTeacher(_) => Ev3Status::Config,
            Ev3Error::Calibration { .. } => Ev3Status::Calibration,
            Ev3Error::Data(_) | Ev3Error::Format { .. } => Ev3Status::Data,
            Ev3Error::Io { .. } => Ev3Status::Io,
            Ev3Error::Dimension { .. } | Ev3Error::Contract(_) => Ev3Status::Contract,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(Ev3Status::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Ev3Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            Ev3Status::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            Ev3Status::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(Ev3Status::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(Ev3Status::Contract, "string contains a nul byte".into()))?;
    write_out(out, c.into_raw(), "out")
}

unsafe fn config_ref<'a>(cfg: *const Ev3Config) -> Result<&'a Ev3Config, Failure> {
    cfg.as_ref().ok_or_else(|| null("config"))
}

unsafe fn results_ref<'a>(res: *const Ev3Results) -> Result<&'a Ev3Results, Failure> {
    res.as_ref().ok_or_else(|| null("results"))
}

/// Message describing the last failed call on this thread, or an empty
/// string. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ev3_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ev3_config_preset_desk(out: *mut *mut Ev3Config) -> Ev3Status {
    guard(|| {
        let handle = Box::new(Ev3Config {
            inner: ExperimentConfig::desk(),
        });
        write_out(out, Box::into_raw(handle), "out")
    })
}

/// Parses `key=value` text on top of the desk preset.
///
/// # Safety
/// `text` must be a nul-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ev3_config_parse(text: *const c_char, out: *mut *mut Ev3Config) -> Ev3Status {
    guard(|| {
        let cfg = ExperimentConfig::parse(read_str(text, "text")?)?;
        cfg.validate()?;
        write_out(out, Box::into_raw(Box::new(Ev3Config { inner: cfg })), "out")
    })
}

/// Sets one config key, leaving the config unchanged on error.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be
/// nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ev3_config_set(cfg: *mut Ev3Config, key: *const c_char, value: *const c_char) -> Ev3Status {
    guard(|| {
        let handle = cfg.as_mut().ok_or_else(|| null("config"))?;
        let (key, value) = (read_str(key, "key")?, read_str(value, "value")?);
        if key.contains(['\n', '#', '=']) || value.contains(['\n', '#']) {
            return Err(Failure(Ev3Status::Config, format!("malformed entry `{key}={value}`")));
        }
        let text = format!("{}{key}={value}\n", handle.inner.to_config_string());
        let updated = ExperimentConfig::parse(&text)?;
        updated.validate()?;
        handle.inner = updated;
        Ok(())
    })
}

/// Writes the complete config as `key=value` text.
///
/// # Safety
/// `cfg` must come from this library and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ev3_config_to_string(cfg: *const Ev3Config, out: *mut *mut c_char) -> Ev3Status {
    guard(|| write_string(out, config_ref(cfg)?.inner.to_config_string()))
}

/// # Safety
/// `cfg` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ev3_config_free(cfg: *mut Ev3Config) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains the teacher and runs the comma-separated `regimes`
/// (e.g. `"morphism,ev3_base"`). Blocks until finished.
///
/// # Safety
/// `cfg` must come from this library, `regimes` must be a nul-terminated
/// string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ev3_experiment_run(
    cfg: *const Ev3Config,
    regimes: *const c_char,
    out: *mut *mut Ev3Results,
) -> Ev3Status {
    guard(|| {
        let cfg = config_ref(cfg)?;
        let regimes = Regime::parse_list(read_str(regimes, "regimes")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let exp = Experiment::prepare(&cfg.inner)?;
        let results = run_experiment(&exp, &regimes, false)?;
        write_out(out, Box::into_raw(Box::new(Ev3Results { inner: results })), "out")
    })
}

/// # Safety
/// `res` must come from this library and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ev3_results_trace_csv(res: *const Ev3Results, out: *mut *mut c_char) -> Ev3Status {
    guard(|| write_string(out, render_trace_csv(&results_ref(res)?.inner)))
}

/// # Safety
/// `res` must come from this library and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ev3_results_pareto_csv(res: *const Ev3Results, out: *mut *mut c_char) -> Ev3Status {
    guard(|| write_string(out, render_pareto_csv(&results_ref(res)?.inner)?))
}

/// # Safety
/// `res` must come from this library and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ev3_results_summary(res: *const Ev3Results, out: *mut *mut c_char) -> Ev3Status {
    guard(|| write_string(out, render_summary(&results_ref(res)?.inner)?))
}

/// Writes trace.csv, pareto.csv and summary.txt into `dir`.
///
/// # Safety
/// `res` must come from this library and `dir` be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ev3_results_write(res: *const Ev3Results, dir: *const c_char) -> Ev3Status {
    guard(|| {
        let res = results_ref(res)?;
        emit_results(&res.inner, Path::new(read_str(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `res` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ev3_results_free(res: *mut Ev3Results) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// # Safety
/// `s` must be a string returned by this library or null.
#[no_mangle]
pub unsafe extern "C" fn ev3_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// One-sided pooled z-test of `ca/na` against `cb/nb`. `z` is NaN when the
/// pooled proportion is 0 or 1; `significant` is 1 when a is better at
/// `confidence`.
///
/// # Safety
/// `z` and `significant` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ev3_z_test(
    ca: usize,
    na: usize,
    cb: usize,
    nb: usize,
    confidence: f64,
    z: *mut f64,
    significant: *mut i32,
) -> Ev3Status {
    guard(|| {
        if z.is_null() || significant.is_null() {
            return Err(null("z or significant"));
        }
        let test = z_test_counts(ca, na, cb, nb, confidence)?;
        write_out(z, test.z.unwrap_or(f64::NAN), "z")?;
        write_out(significant, i32::from(test.verdict.is_significant()), "significant")
    })
}

/// Parameter count of a network with `n_stages` stages of the given widths
/// and block counts.
///
/// # Safety
/// `widths` and `blocks` must point to `n_stages` values; `out` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ev3_param_count(
    input_dim: usize,
    num_classes: usize,
    widths: *const usize,
    blocks: *const usize,
    n_stages: usize,
    out: *mut usize,
) -> Ev3Status {
    guard(|| {
        if n_stages > 0 && (widths.is_null() || blocks.is_null()) {
            return Err(null("widths or blocks"));
        }
        let pairs: Vec<(usize, usize)> = if n_stages == 0 {
            Vec::new()
        } else {
            let w = std::slice::from_raw_parts(widths, n_stages);
            let b = std::slice::from_raw_parts(blocks, n_stages);
            w.iter().copied().zip(b.iter().copied()).collect()
        };
        let spec = GraphSpec::from_pairs(input_dim, num_classes, &pairs)?;
        write_out(out, param_count(&spec)?, "out")
    })
}

/// Parameter counts of the config's size ladder, smallest first. Writes at
/// most `cap` values into `out` and the ladder length into `len`.
///
/// # Safety
/// `cfg` must come from this library, `out` must hold `cap` values and
/// `len` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ev3_config_ladder_param_counts(
    cfg: *const Ev3Config,
    out: *mut usize,
    cap: usize,
    len: *mut usize,
) -> Ev3Status {
    guard(|| {
        let ladder = config_ref(cfg)?.inner.ladder()?;
        if len.is_null() || (cap > 0 && out.is_null()) {
            return Err(null("out or len"));
        }
        for (i, spec) in ladder.iter().take(cap).enumerate() {
            out.add(i).write(param_count(spec)?);
        }
        len.write(ladder.len());
        Ok(())
    })
}
