//! C ABI surface for the sbi library: opaque handles, integer error
//! codes, and a thread-local last-error message. The matching header
//! lives in `include/sbi.h` and is maintained by hand — keep the two in
//! sync when adding functions.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use sbi::bnn::bma_log_density;
use sbi::error::SbiError;
use sbi::runner::{build_estimator, evaluation_weight_sets, obs_bounds, ModelArtifact, Paths};
use sbi::simulators::dataset::Dataset;
use sbi::simulators::Simulator;

pub const SBI_OK: i32 = 0;
pub const SBI_ERR_NULL_POINTER: i32 = 1;
pub const SBI_ERR_INVALID_UTF8: i32 = 2;
pub const SBI_ERR_UNKNOWN_SIMULATOR: i32 = 3;
pub const SBI_ERR_INVALID_ARGUMENT: i32 = 4;
pub const SBI_ERR_IO: i32 = 5;
pub const SBI_ERR_NUMERIC: i32 = 6;
pub const SBI_ERR_ARTIFACT: i32 = 7;
pub const SBI_ERR_PANIC: i32 = 8;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(code: i32, message: &str) -> i32 {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    code
}

fn code_for(err: &SbiError) -> i32 {
    match err {
        SbiError::UnknownSimulator(_) => SBI_ERR_UNKNOWN_SIMULATOR,
        SbiError::Io(_) | SbiError::Json(_) => SBI_ERR_IO,
        SbiError::ArtifactMismatch(_) | SbiError::AlreadyExists(_) | SbiError::Config(_) => {
            SBI_ERR_ARTIFACT
        }
        SbiError::NonFinite { .. } | SbiError::CholeskyFailure(_) | SbiError::Divergence(_) => {
            SBI_ERR_NUMERIC
        }
        _ => SBI_ERR_INVALID_ARGUMENT,
    }
}

fn report(err: SbiError) -> i32 {
    set_error(code_for(&err), &err.to_string())
}

/// Run `f` with panics converted to an error code instead of unwinding
/// across the FFI boundary.
fn guarded(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => set_error(SBI_ERR_PANIC, "internal panic"),
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char) -> Result<&'a str, i32> {
    if ptr.is_null() {
        return Err(set_error(SBI_ERR_NULL_POINTER, "null string argument"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| set_error(SBI_ERR_INVALID_UTF8, "string argument is not UTF-8"))
}

/// Message for the most recent error on this thread; valid until the
/// next failing call. Never null.
#[no_mangle]
pub extern "C" fn sbi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn sbi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

pub struct SbiSimulator {
    inner: Simulator,
}

pub struct SbiDataset {
    inner: Dataset,
}

/// A loaded posterior model: architecture plus the weight sets averaged
/// at prediction time.
pub struct SbiModel {
    estimator: sbi::estimators::PosteriorEstimator,
    weight_sets: Vec<Vec<f64>>,
}

/// # Safety
/// `name` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn sbi_simulator_create(
    name: *const c_char,
    out: *mut *mut SbiSimulator,
) -> i32 {
    guarded(|| {
        if out.is_null() {
            return set_error(SBI_ERR_NULL_POINTER, "null out pointer");
        }
        let name = match str_arg(name) {
            Ok(s) => s,
            Err(code) => return code,
        };
        match Simulator::by_name(name) {
            Ok(sim) => {
                *out = Box::into_raw(Box::new(SbiSimulator { inner: sim }));
                SBI_OK
            }
            Err(e) => report(e),
        }
    })
}

/// # Safety
/// `sim` must have come from `sbi_simulator_create` and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbi_simulator_free(sim: *mut SbiSimulator) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// # Safety
/// `sim` must be a live simulator handle.
#[no_mangle]
pub unsafe extern "C" fn sbi_simulator_theta_dim(sim: *const SbiSimulator) -> usize {
    if sim.is_null() {
        return 0;
    }
    (*sim).inner.theta_dim
}

/// # Safety
/// `sim` must be a live simulator handle.
#[no_mangle]
pub unsafe extern "C" fn sbi_simulator_x_dim(sim: *const SbiSimulator) -> usize {
    if sim.is_null() {
        return 0;
    }
    (*sim).inner.x_dim
}

/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbi_simulator_generate(
    sim: *const SbiSimulator,
    budget: usize,
    seed: u64,
    out: *mut *mut SbiDataset,
) -> i32 {
    guarded(|| {
        if sim.is_null() || out.is_null() {
            return set_error(SBI_ERR_NULL_POINTER, "null handle or out pointer");
        }
        match (*sim).inner.generate_dataset(budget, seed) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(SbiDataset { inner: ds }));
                SBI_OK
            }
            Err(e) => report(e),
        }
    })
}

/// # Safety
/// `ds` must have come from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbi_dataset_free(ds: *mut SbiDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sbi_dataset_len(ds: *const SbiDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    (*ds).inner.len()
}

/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sbi_dataset_theta_dim(ds: *const SbiDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    (*ds).inner.theta_dim()
}

/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sbi_dataset_x_dim(ds: *const SbiDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    (*ds).inner.x_dim()
}

unsafe fn copy_matrix(data: &[f64], out: *mut f64, capacity: usize) -> i32 {
    if out.is_null() {
        return set_error(SBI_ERR_NULL_POINTER, "null output buffer");
    }
    if capacity < data.len() {
        return set_error(
            SBI_ERR_INVALID_ARGUMENT,
            &format!("buffer holds {capacity} values, need {}", data.len()),
        );
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    SBI_OK
}

/// Copy the parameter matrix row-major into `out` (capacity in f64
/// elements, must be ≥ len·theta_dim).
///
/// # Safety
/// `ds` must be live; `out` must point to at least `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn sbi_dataset_thetas(
    ds: *const SbiDataset,
    out: *mut f64,
    capacity: usize,
) -> i32 {
    guarded(|| {
        if ds.is_null() {
            return set_error(SBI_ERR_NULL_POINTER, "null dataset handle");
        }
        copy_matrix((*ds).inner.thetas.data(), out, capacity)
    })
}

/// Copy the observation matrix row-major into `out`.
///
/// # Safety
/// `ds` must be live; `out` must point to at least `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn sbi_dataset_xs(
    ds: *const SbiDataset,
    out: *mut f64,
    capacity: usize,
) -> i32 {
    guarded(|| {
        if ds.is_null() {
            return set_error(SBI_ERR_NULL_POINTER, "null dataset handle");
        }
        copy_matrix((*ds).inner.xs.data(), out, capacity)
    })
}

/// # Safety
/// `ds` must be live; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sbi_dataset_save(ds: *const SbiDataset, path: *const c_char) -> i32 {
    guarded(|| {
        if ds.is_null() {
            return set_error(SBI_ERR_NULL_POINTER, "null dataset handle");
        }
        let path = match str_arg(path) {
            Ok(s) => s,
            Err(code) => return code,
        };
        match (*ds).inner.save(Path::new(path)) {
            Ok(()) => SBI_OK,
            Err(e) => report(e),
        }
    })
}

/// # Safety
/// `path` must be a valid NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbi_dataset_load(path: *const c_char, out: *mut *mut SbiDataset) -> i32 {
    guarded(|| {
        if out.is_null() {
            return set_error(SBI_ERR_NULL_POINTER, "null out pointer");
        }
        let path = match str_arg(path) {
            Ok(s) => s,
            Err(code) => return code,
        };
        match Dataset::load(Path::new(path)) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(SbiDataset { inner: ds }));
                SBI_OK
            }
            Err(e) => report(e),
        }
    })
}

/// Load a trained model artifact produced by `sbi train`. BNN artifacts
/// have their model-average weight sets drawn here, with the same seed
/// the evaluate command uses.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbi_model_load(path: *const c_char, out: *mut *mut SbiModel) -> i32 {
    guarded(|| {
        if out.is_null() {
            return set_error(SBI_ERR_NULL_POINTER, "null out pointer");
        }
        let path = match str_arg(path) {
            Ok(s) => s,
            Err(code) => return code,
        };
        let load = || -> sbi::error::Result<SbiModel> {
            let text = std::fs::read_to_string(PathBuf::from(path))?;
            let artifact: ModelArtifact = serde_json::from_str(&text)?;
            let cfg = &artifact.config;
            let sim = Simulator::by_name(&cfg.simulator)?;
            let paths = Paths::resolve(&cfg.out_dir);
            let bounds = obs_bounds(&paths, &sim)?;
            let estimator = build_estimator(cfg, &sim, &bounds);
            let weight_sets = evaluation_weight_sets(cfg, &artifact)?;
            Ok(SbiModel {
                estimator,
                weight_sets,
            })
        };
        match load() {
            Ok(model) => {
                *out = Box::into_raw(Box::new(model));
                SBI_OK
            }
            Err(e) => report(e),
        }
    })
}

/// # Safety
/// `model` must have come from `sbi_model_load` and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbi_model_free(model: *mut SbiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live model handle.
#[no_mangle]
pub unsafe extern "C" fn sbi_model_theta_dim(model: *const SbiModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).estimator.theta_dim
}

/// # Safety
/// `model` must be a live model handle.
#[no_mangle]
pub unsafe extern "C" fn sbi_model_x_dim(model: *const SbiModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).estimator.x_dim
}

/// Model-averaged log posterior density log p(theta | x).
///
/// # Safety
/// `model` must be live; `theta` and `x` must point to `theta_dim` and
/// `x_dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbi_model_log_posterior(
    model: *const SbiModel,
    theta: *const f64,
    theta_dim: usize,
    x: *const f64,
    x_dim: usize,
    out: *mut f64,
) -> i32 {
    guarded(|| {
        if model.is_null() || theta.is_null() || x.is_null() || out.is_null() {
            return set_error(SBI_ERR_NULL_POINTER, "null argument");
        }
        let m = &*model;
        if theta_dim != m.estimator.theta_dim || x_dim != m.estimator.x_dim {
            return set_error(
                SBI_ERR_INVALID_ARGUMENT,
                &format!(
                    "expected theta dim {} and x dim {}, got {theta_dim} and {x_dim}",
                    m.estimator.theta_dim, m.estimator.x_dim
                ),
            );
        }
        let theta = std::slice::from_raw_parts(theta, theta_dim);
        let x = std::slice::from_raw_parts(x, x_dim);
        match bma_log_density(&m.estimator, &m.weight_sets, theta, x) {
            Ok(v) => {
                *out = v;
                SBI_OK
            }
            Err(e) => report(e),
        }
    })
}
