//! C interface to dataset generation and experiment runs.
//!
//! Every fallible function returns a [`SeqdgStatus`] and writes its result
//! through an out-pointer. On failure the message is kept per thread and can
//! be read with [`seqdg_last_error`]. Handles are opaque and owned by the
//! caller until passed to the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use seqdg::domains::{synth_rotated, DomainSet, RotatedClusters};
use seqdg::harness::{run_on, ExperimentConfig, RunReport};
use seqdg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqdgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Io = 5,
    Numeric = 6,
    Fold = 7,
    Utf8 = 8,
    Panic = 9,
}

/// A multi-domain dataset.
pub struct SeqdgDomainSet {
    inner: DomainSet,
}

/// The outcome of an experiment.
pub struct SeqdgReport {
    inner: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SeqdgStatus {
    match err {
        Error::Config(_) => SeqdgStatus::Config,
        Error::Parse(_) | Error::Json(_) => SeqdgStatus::Parse,
        Error::Io { .. } => SeqdgStatus::Io,
        Error::NonFinite { .. } | Error::NonFiniteInput(_) => SeqdgStatus::Numeric,
        Error::Fold { .. } => SeqdgStatus::Fold,
        _ => SeqdgStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (SeqdgStatus, String)>) -> SeqdgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SeqdgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside seqdg".into());
            SeqdgStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SeqdgStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SeqdgStatus, String) {
    (SeqdgStatus::NullPointer, format!("{what} is NULL"))
}

/// # Safety
/// `p` is NULL or a NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SeqdgStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (SeqdgStatus::Utf8, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn seqdg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn seqdg_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version has no interior NUL"),
    };
    VERSION.as_ptr()
}

/// Rotated-cluster dataset: `domains` domains of `n` samples over `classes`
/// classes, domain `i` rotated by `i * angle_deg`.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn seqdg_domainset_generate(
    domains: usize,
    classes: usize,
    n: usize,
    angle_deg: f64,
    noise_sd: f64,
    seed: u64,
    out: *mut *mut SeqdgDomainSet,
) -> SeqdgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = synth_rotated(&RotatedClusters {
            num_domains: domains,
            classes,
            n_per_domain: n,
            angle_step_deg: angle_deg,
            noise_sd,
            seed,
        })
        .map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(SeqdgDomainSet { inner })) };
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn seqdg_domainset_load(path: *const c_char, out: *mut *mut SeqdgDomainSet) -> SeqdgStatus {
    guard(|| {
        let path = unsafe { read_str(path, "path") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = DomainSet::load(PathBuf::from(path)).map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(SeqdgDomainSet { inner })) };
        Ok(())
    })
}

/// # Safety
/// `set` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn seqdg_domainset_save(set: *const SeqdgDomainSet, path: *const c_char) -> SeqdgStatus {
    guard(|| {
        let set = unsafe { set.as_ref() }.ok_or_else(|| null("set"))?;
        let path = unsafe { read_str(path, "path") }?;
        set.inner.save(path).map_err(lib_err)
    })
}

/// # Safety
/// `set` is a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn seqdg_domainset_num_domains(set: *const SeqdgDomainSet, out: *mut usize) -> SeqdgStatus {
    guard(|| {
        let set = unsafe { set.as_ref() }.ok_or_else(|| null("set"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = set.inner.len() };
        Ok(())
    })
}

/// # Safety
/// `set` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seqdg_domainset_free(set: *mut SeqdgDomainSet) {
    if !set.is_null() {
        drop(unsafe { Box::from_raw(set) });
    }
}

/// Runs the experiment described by `config_toml` on `set`, or on the
/// config's own dataset when `set` is NULL. `jobs` bounds concurrent runs
/// (0: all cores).
///
/// # Safety
/// `config_toml` is a NUL-terminated string; `set` is NULL or a live handle;
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn seqdg_experiment_run(
    config_toml: *const c_char,
    set: *const SeqdgDomainSet,
    jobs: usize,
    out: *mut *mut SeqdgReport,
) -> SeqdgStatus {
    guard(|| {
        let text = unsafe { read_str(config_toml, "config_toml") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ExperimentConfig::from_toml(text).map_err(lib_err)?;
        let report = match unsafe { set.as_ref() } {
            Some(s) => run_on(&cfg, &s.inner, jobs),
            None => cfg.dataset.load(None).and_then(|s| run_on(&cfg, &s, jobs)),
        }
        .map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(SeqdgReport { inner: report })) };
        Ok(())
    })
}

/// Report as JSON. The string must be released with [`seqdg_string_free`].
///
/// # Safety
/// `report` is a live handle; `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn seqdg_report_json(report: *const SeqdgReport, out: *mut *mut c_char) -> SeqdgStatus {
    guard(|| {
        let report = unsafe { report.as_ref() }.ok_or_else(|| null("report"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = report.inner.to_json().map_err(lib_err)?;
        let c = CString::new(json).map_err(|e| (SeqdgStatus::Parse, e.to_string()))?;
        unsafe { *out = c.into_raw() };
        Ok(())
    })
}

/// Mean held-out accuracy over every run.
///
/// # Safety
/// `report` is a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn seqdg_report_mean_accuracy(report: *const SeqdgReport, out: *mut f64) -> SeqdgStatus {
    guard(|| {
        let report = unsafe { report.as_ref() }.ok_or_else(|| null("report"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = report.inner.summary.mean_acc };
        Ok(())
    })
}

/// Number of (fold, seed) runs in the report.
///
/// # Safety
/// `report` is a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn seqdg_report_num_runs(report: *const SeqdgReport, out: *mut usize) -> SeqdgStatus {
    guard(|| {
        let report = unsafe { report.as_ref() }.ok_or_else(|| null("report"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = report.inner.runs.len() };
        Ok(())
    })
}

/// # Safety
/// `report` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seqdg_report_free(report: *mut SeqdgReport) {
    if !report.is_null() {
        drop(unsafe { Box::from_raw(report) });
    }
}

/// # Safety
/// `s` is NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seqdg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
