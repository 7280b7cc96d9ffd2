//! C ABI for the cornerspace steady-state solver.
//!
//! Handles are opaque; every constructor has a matching `_free`, and all
//! fallible calls return a [`CspStatus`] code with the detailed message
//! readable through [`csp_last_error_message`]. Absent observable values
//! (undefined ratios, missing statistical errors) come back as NaN.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::PathBuf;

use cornerspace::cli::{self, ExperimentConfig, RunOutcome};
use cornerspace::meanfield::gutzwiller_fixed_point;
use cornerspace::model::{Interaction, ModelParams};

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CspStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidConfig = 4,
    RunError = 5,
    OutOfRange = 6,
}

/// Opaque experiment configuration.
pub struct CspConfig {
    inner: ExperimentConfig,
}

/// Opaque run result: the rows written to results.csv plus the exit code.
pub struct CspResult {
    outcome: RunOutcome,
}

/// One observable row; NaN marks an absent value.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CspRow {
    pub lx: u32,
    pub ly: u32,
    pub m: u64,
    /// 0 nullspace, 1 direct, 2 mcwf, 3 meanfield, 255 other.
    pub solver: u8,
    pub n: f64,
    pub n_err: f64,
    pub re_b: f64,
    pub re_b_err: f64,
    pub im_b: f64,
    pub im_b_err: f64,
    pub g2: f64,
    pub g2_err: f64,
    pub g2_nn: f64,
    pub g2_nn_err: f64,
}

/// Self-consistent single-site mean-field solution.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CspMeanField {
    pub n: f64,
    pub re_b: f64,
    pub im_b: f64,
    /// NaN when undefined (vanishing density).
    pub g2: f64,
    pub iterations: u64,
    pub residual: f64,
    pub converged: bool,
}

/// Model parameters for the direct mean-field entry point. `hardcore`
/// nonzero selects the two-level limit and ignores `u`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CspModelParams {
    pub delta_omega: f64,
    pub u: f64,
    pub hardcore: u8,
    pub j: f64,
    pub f: f64,
    pub gamma: f64,
    pub n_max: u64,
    pub z: u64,
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn csp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread; valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn csp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, CspStatus> {
    if ptr.is_null() {
        set_last_error("null string argument");
        return Err(CspStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|e| {
        set_last_error(&format!("argument is not UTF-8: {e}"));
        CspStatus::InvalidUtf8
    })
}

/// Parse a JSON experiment configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer. On
/// success `*out` owns a config that must be released with
/// [`csp_config_free`].
#[no_mangle]
pub unsafe extern "C" fn csp_config_from_json(
    json: *const c_char,
    out: *mut *mut CspConfig,
) -> CspStatus {
    if out.is_null() {
        set_last_error("null output pointer");
        return CspStatus::NullArgument;
    }
    let text = match cstr_arg(json) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let config = match ExperimentConfig::from_json(text) {
        Ok(c) => c,
        Err(e) => {
            set_last_error(&e.to_string());
            return CspStatus::ParseError;
        }
    };
    if let Err(e) = config.validate() {
        set_last_error(&e.to_string());
        return CspStatus::InvalidConfig;
    }
    *out = Box::into_raw(Box::new(CspConfig { inner: config }));
    CspStatus::Ok
}

/// Serialize a config back to JSON; the returned string must be released
/// with [`csp_string_free`].
///
/// # Safety
/// `config` must come from this library and be live.
#[no_mangle]
pub unsafe extern "C" fn csp_config_to_json(config: *const CspConfig) -> *mut c_char {
    if config.is_null() {
        set_last_error("null config");
        return std::ptr::null_mut();
    }
    let json = match serde_json::to_string_pretty(&(*config).inner) {
        Ok(j) => j,
        Err(e) => {
            set_last_error(&e.to_string());
            return std::ptr::null_mut();
        }
    };
    CString::new(json).map(CString::into_raw).unwrap_or_else(|_| std::ptr::null_mut())
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must have been returned by a `csp_*` call and not freed before.
#[no_mangle]
pub unsafe extern "C" fn csp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `config` must come from [`csp_config_from_json`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn csp_config_free(config: *mut CspConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

fn run_to_result(outcome: RunOutcome, out: *mut *mut CspResult) -> CspStatus {
    unsafe {
        *out = Box::into_raw(Box::new(CspResult { outcome }));
    }
    CspStatus::Ok
}

/// Execute a configured experiment; output files are written to the
/// config's output directory.
///
/// # Safety
/// `config` must be live; `out` must be valid. `*out` must be released
/// with [`csp_result_free`].
#[no_mangle]
pub unsafe extern "C" fn csp_run(config: *const CspConfig, out: *mut *mut CspResult) -> CspStatus {
    if config.is_null() || out.is_null() {
        set_last_error("null argument");
        return CspStatus::NullArgument;
    }
    match cli::run_experiment(&(*config).inner) {
        Ok(outcome) => run_to_result(outcome, out),
        Err(e) => {
            set_last_error(&e.to_string());
            CspStatus::RunError
        }
    }
}

/// Run a named preset. `out_dir` may be NULL for the preset default;
/// `seed` and `m_max` of zero mean "leave unchanged".
///
/// # Safety
/// Strings must be NUL-terminated or NULL; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn csp_run_preset(
    name: *const c_char,
    out_dir: *const c_char,
    seed: u64,
    m_max: u64,
    out: *mut *mut CspResult,
) -> CspStatus {
    if out.is_null() {
        set_last_error("null output pointer");
        return CspStatus::NullArgument;
    }
    let name = match cstr_arg(name) {
        Ok(n) => n,
        Err(s) => return s,
    };
    let dir = if out_dir.is_null() {
        None
    } else {
        match cstr_arg(out_dir) {
            Ok(d) => Some(PathBuf::from(d)),
            Err(s) => return s,
        }
    };
    let seed = if seed == 0 { None } else { Some(seed) };
    let m_max = if m_max == 0 { None } else { Some(m_max as usize) };
    match cli::run_preset(name, dir.as_deref(), seed, m_max) {
        Ok(outcome) => run_to_result(outcome, out),
        Err(e) => {
            set_last_error(&e.to_string());
            CspStatus::RunError
        }
    }
}

/// Newline-separated preset catalog; release with [`csp_string_free`].
#[no_mangle]
pub extern "C" fn csp_list_presets() -> *mut c_char {
    CString::new(cli::list_presets())
        .map(CString::into_raw)
        .unwrap_or_else(|_| std::ptr::null_mut())
}

/// # Safety
/// `result` must be live.
#[no_mangle]
pub unsafe extern "C" fn csp_result_row_count(result: *const CspResult) -> u64 {
    if result.is_null() {
        return 0;
    }
    (*result).outcome.rows.len() as u64
}

/// # Safety
/// `result` must be live.
#[no_mangle]
pub unsafe extern "C" fn csp_result_exit_code(result: *const CspResult) -> i32 {
    if result.is_null() {
        return 1;
    }
    (*result).outcome.exit_code
}

fn solver_code(name: &str) -> u8 {
    match name {
        "nullspace" => 0,
        "direct" => 1,
        "mcwf" => 2,
        "meanfield" => 3,
        _ => 255,
    }
}

/// Copy row `index` into `row`.
///
/// # Safety
/// `result` must be live and `row` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csp_result_row(
    result: *const CspResult,
    index: u64,
    row: *mut CspRow,
) -> CspStatus {
    if result.is_null() || row.is_null() {
        set_last_error("null argument");
        return CspStatus::NullArgument;
    }
    let rows = &(*result).outcome.rows;
    let Some(r) = rows.get(index as usize) else {
        set_last_error(&format!(
            "row index {index} out of range ({} rows)",
            rows.len()
        ));
        return CspStatus::OutOfRange;
    };
    let rec = &r.record;
    let e = rec.errors;
    *row = CspRow {
        lx: r.lx as u32,
        ly: r.ly as u32,
        m: r.m as u64,
        solver: solver_code(&r.solver),
        n: rec.n,
        n_err: e.map_or(f64::NAN, |e| e.n),
        re_b: rec.re_b,
        re_b_err: e.map_or(f64::NAN, |e| e.re_b),
        im_b: rec.im_b,
        im_b_err: e.map_or(f64::NAN, |e| e.im_b),
        g2: rec.g2_onsite.unwrap_or(f64::NAN),
        g2_err: match (e, rec.g2_onsite) {
            (Some(e), Some(_)) => e.g2_onsite,
            _ => f64::NAN,
        },
        g2_nn: rec.g2_nn.unwrap_or(f64::NAN),
        g2_nn_err: match (e, rec.g2_nn) {
            (Some(e), Some(_)) => e.g2_nn,
            _ => f64::NAN,
        },
    };
    CspStatus::Ok
}

/// # Safety
/// `result` must come from a run call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn csp_result_free(result: *mut CspResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Solve the self-consistent Gutzwiller single-site problem directly.
///
/// # Safety
/// `params` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn csp_meanfield(
    params: *const CspModelParams,
    out: *mut CspMeanField,
) -> CspStatus {
    if params.is_null() || out.is_null() {
        set_last_error("null argument");
        return CspStatus::NullArgument;
    }
    let p = &*params;
    let model = ModelParams {
        delta_omega: p.delta_omega,
        interaction: if p.hardcore != 0 {
            Interaction::HardCore
        } else {
            Interaction::Finite(p.u)
        },
        hopping: p.j,
        drive: p.f,
        gamma: p.gamma,
        n_max: p.n_max as usize,
        z: p.z.max(1) as usize,
    };
    if let Err(e) = model.validate() {
        set_last_error(&e.to_string());
        return CspStatus::InvalidConfig;
    }
    match gutzwiller_fixed_point(&model, 0.5, 1e-10, 5000) {
        Ok(mf) => {
            *out = CspMeanField {
                n: mf.n,
                re_b: mf.b_mean.re,
                im_b: mf.b_mean.im,
                g2: mf.g2_onsite.unwrap_or(f64::NAN),
                iterations: mf.iterations as u64,
                residual: mf.residual,
                converged: mf.converged,
            };
            CspStatus::Ok
        }
        Err(e) => {
            set_last_error(&e.to_string());
            CspStatus::RunError
        }
    }
}
