//! C interface to the mtdlab core.
//!
//! Objects cross the boundary as opaque pointers created by a `*_new`,
//! `*_load`, `*_parse` or `*_run` function and released with the matching
//! `*_free`. Fallible calls return an [`MtdlabStatus`]; the message of the
//! most recent failure on the calling thread is available from
//! [`mtdlab_last_error`]. Strings returned by the library must be released
//! with [`mtdlab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mtdlab::casefile::{load_case, NetworkCase};
use mtdlab::estimator::chi2_threshold;
use mtdlab::harness::{run_scenario, ExperimentReport, ScenarioConfig};
use mtdlab::Error;

/// Result of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtdlabStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Unknown key, unparsable value or inconsistent scenario.
    Config = 3,
    /// Case file missing or malformed.
    Case = 4,
    /// Singular system, non-convergence or a similar numerical failure.
    Numerical = 5,
    /// The attacker declined to attack.
    Abstained = 6,
    /// The requested value does not exist, e.g. a detection probability
    /// when every trial abstained.
    NotAvailable = 7,
    /// A panic was caught at the boundary.
    Panic = 8,
    /// Any other failure.
    Failed = 9,
}

/// A loaded network case.
pub struct MtdlabCase(NetworkCase);

/// A scenario configuration.
pub struct MtdlabConfig(ScenarioConfig);

/// The report of one scenario run.
pub struct MtdlabReport(ExperimentReport);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MtdlabStatus {
    match e {
        Error::Config(_) | Error::MixedConfigs(_) => MtdlabStatus::Config,
        Error::Io(_) | Error::Syntax { .. } | Error::Semantic(_) | Error::DegenerateImpedance { .. } => MtdlabStatus::Case,
        Error::Abstain(_) => MtdlabStatus::Abstained,
        Error::Unobservable { .. }
        | Error::Singular
        | Error::NonConvergence { .. }
        | Error::DegreesOfFreedom { .. }
        | Error::Whitening { .. }
        | Error::Perplexity { .. }
        | Error::DuplicatePoints(_) => MtdlabStatus::Numerical,
        _ => MtdlabStatus::Failed,
    }
}

fn fail(status: MtdlabStatus, msg: &str) -> MtdlabStatus {
    set_error(msg);
    status
}

/// Runs `f`, recording its error message and turning panics into
/// [`MtdlabStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), MtdlabStatus>) -> MtdlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MtdlabStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(MtdlabStatus::Panic, "panic inside mtdlab"),
    }
}

fn core(e: Error) -> MtdlabStatus {
    fail(status_of(&e), &e.to_string())
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, MtdlabStatus> {
    if p.is_null() {
        return Err(fail(MtdlabStatus::NullArgument, &format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(MtdlabStatus::InvalidUtf8, &format!("{what} is not UTF-8")))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), MtdlabStatus> {
    if p.is_null() {
        Err(fail(MtdlabStatus::NullArgument, &format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread; empty after a call
/// that returned [`MtdlabStatus::Ok`].
/// The pointer stays valid until the next call into the library from the
/// same thread.
#[no_mangle]
pub extern "C" fn mtdlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a bundled case (`"case14"`, `"case118"`) or a case file.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_case_load(name: *const c_char, out: *mut *mut MtdlabCase) -> MtdlabStatus {
    guard(|| {
        non_null(out, "out")?;
        let name = text(name, "name")?;
        let case = load_case(name).map_err(core)?;
        *out = Box::into_raw(Box::new(MtdlabCase(case)));
        Ok(())
    })
}

/// Number of buses; 0 for null.
///
/// # Safety
/// `handle` must be null or a live case handle.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_case_bus_count(handle: *const MtdlabCase) -> usize {
    handle.as_ref().map_or(0, |c| c.0.bus_count())
}

/// Number of branches, in or out of service; 0 for null.
///
/// # Safety
/// `handle` must be null or a live case handle.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_case_branch_count(handle: *const MtdlabCase) -> usize {
    handle.as_ref().map_or(0, |c| c.0.branch_count())
}

/// # Safety
/// `handle` must be null or a live case handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_case_free(handle: *mut MtdlabCase) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Residual threshold for `m` meters, `n` states, confidence `alpha` and
/// noise scale `sigma`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_chi2_threshold(m: usize, n: usize, alpha: f64, sigma: f64, out: *mut f64) -> MtdlabStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = chi2_threshold(m, n, alpha, sigma).map_err(core)?;
        Ok(())
    })
}

/// A configuration holding the defaults.
#[no_mangle]
pub extern "C" fn mtdlab_config_new() -> *mut MtdlabConfig {
    Box::into_raw(Box::new(MtdlabConfig(ScenarioConfig::default())))
}

/// Parses a `key = value` document on top of the defaults.
///
/// # Safety
/// `source` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_config_parse(source: *const c_char, out: *mut *mut MtdlabConfig) -> MtdlabStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = ScenarioConfig::parse(text(source, "source")?).map_err(core)?;
        *out = Box::into_raw(Box::new(MtdlabConfig(cfg)));
        Ok(())
    })
}

/// Sets one field, using the config-file key names.
///
/// # Safety
/// `config` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_config_set(config: *mut MtdlabConfig, key: *const c_char, value: *const c_char) -> MtdlabStatus {
    guard(|| {
        non_null(config, "config")?;
        let (k, v) = (text(key, "key")?, text(value, "value")?);
        (*config).0.set(k, v).map_err(core)
    })
}

/// The configuration as a `key = value` document.
///
/// # Safety
/// `config` must be a live handle. Free the result with
/// [`mtdlab_string_free`]; null on failure.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_config_text(config: *const MtdlabConfig) -> *mut c_char {
    let Some(c) = config.as_ref() else {
        set_error("config is null");
        return ptr::null_mut();
    };
    CString::new(c.0.to_text()).map_or(ptr::null_mut(), CString::into_raw)
}

/// # Safety
/// `config` must be null or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_config_free(config: *mut MtdlabConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs every trial of the scenario.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_run_scenario(config: *const MtdlabConfig, out: *mut *mut MtdlabReport) -> MtdlabStatus {
    guard(|| {
        non_null(config, "config")?;
        non_null(out, "out")?;
        let report = run_scenario(&(*config).0).map_err(core)?;
        *out = Box::into_raw(Box::new(MtdlabReport(report)));
        Ok(())
    })
}

/// Number of trials in the report; 0 for null.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_report_trials(report: *const MtdlabReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.trials())
}

/// Trials in which the attacker abstained; 0 for null.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_report_abstentions(report: *const MtdlabReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.abstentions)
}

/// Detections over non-abstained trials. Returns
/// [`MtdlabStatus::NotAvailable`] when every trial abstained.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_report_detection_probability(report: *const MtdlabReport, out: *mut f64) -> MtdlabStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(out, "out")?;
        match (*report).0.detection_probability {
            Some(p) => {
                *out = p;
                Ok(())
            }
            None => Err(fail(MtdlabStatus::NotAvailable, "every trial abstained")),
        }
    })
}

/// The per-trial report CSV.
///
/// # Safety
/// `report` must be a live handle. Free the result with
/// [`mtdlab_string_free`]; null on failure.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_report_csv(report: *const MtdlabReport) -> *mut c_char {
    let Some(r) = report.as_ref() else {
        set_error("report is null");
        return ptr::null_mut();
    };
    CString::new(r.0.to_csv()).map_or(ptr::null_mut(), CString::into_raw)
}

/// # Safety
/// `report` must be null or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtdlab_report_free(report: *mut MtdlabReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
