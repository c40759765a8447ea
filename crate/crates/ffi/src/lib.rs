//! C ABI for the conformal regression toolkit.
//!
//! Handles are opaque pointers created and destroyed by this library; never
//! free them with anything but the matching `*_free` function. Every
//! fallible function returns a [`DoicrStatus`]; when it is not `Ok`,
//! [`doicr_last_error`] holds a message for the calling thread until the
//! next failure overwrites it.
//!
//! Training wraps the whole pipeline: the dataset is split, standardized,
//! the network trained and (except for `qdsoft`) conformally calibrated on
//! the held-out partition. Prediction and evaluation then work in the
//! original units of the data.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use doicr::data::{make_splits, synth_heteroscedastic, Dataset, SplitScheme};
use doicr::matrix::Matrix;
use doicr::trainer::{
    self, Method, ModelBundle, TrainConfig, TrainedModel, BUNDLE_FORMAT_VERSION,
};
use doicr::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DoicrStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments were structurally valid but semantically wrong (unknown
    /// method name, shape mismatch, out-of-range level).
    InvalidArgument = 2,
    /// Training or calibration failed (diverged, not enough data).
    TrainingError = 3,
    /// Reading or writing a file failed.
    IoError = 4,
    /// A panic was caught at the boundary; the handle state is unchanged
    /// but the operation did not complete.
    Panic = 5,
}

/// Coverage and width of a model on a test set, in the data's original
/// units.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DoicrMetrics {
    /// Fraction of targets inside their interval.
    pub picp: f64,
    /// Mean interval width; infinite when the intervals are unbounded.
    pub mpiw: f64,
    /// Number of test rows.
    pub n: usize,
    /// True when calibration could not produce a finite quantile.
    pub unbounded: bool,
}

/// Opaque dataset handle.
pub struct DoicrDataset {
    inner: Dataset,
}

/// A trained model plus everything needed to predict in original units.
#[derive(Serialize, Deserialize)]
struct CalibratedModel {
    bundle: ModelBundle,
    /// Conformal quantile in standardized units; `None` when the intervals
    /// are unbounded or the model predicts bounds directly.
    q: Option<f64>,
}

/// Opaque model handle.
pub struct DoicrModel {
    inner: CalibratedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).ok();
    });
}

fn status_for(err: &Error) -> DoicrStatus {
    match err {
        Error::InsufficientCalibration { .. }
        | Error::NonFiniteLoss { .. }
        | Error::GridExhausted { .. } => DoicrStatus::TrainingError,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Checkpoint(_) => {
            DoicrStatus::IoError
        }
        _ => DoicrStatus::InvalidArgument,
    }
}

fn fail(err: &Error) -> DoicrStatus {
    set_error(&err.to_string());
    status_for(err)
}

fn null_argument(what: &str) -> DoicrStatus {
    set_error(&format!("{what} must not be null"));
    DoicrStatus::NullArgument
}

fn boundary(f: impl FnOnce() -> DoicrStatus) -> DoicrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic across the FFI boundary");
            DoicrStatus::Panic
        }
    }
}

/// Message for the calling thread's most recent failure, or null if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn doicr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map(|s| s.as_ptr())
            .unwrap_or(std::ptr::null())
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn doicr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a dataset from a row-major `rows x cols` feature array and a
/// target array of length `rows`. The data is copied.
///
/// # Safety
/// `x` must point to `rows * cols` doubles and `y` to `rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn doicr_dataset_from_arrays(
    x: *const f64,
    rows: usize,
    cols: usize,
    y: *const f64,
    out: *mut *mut DoicrDataset,
) -> DoicrStatus {
    boundary(|| {
        if out.is_null() {
            return null_argument("out");
        }
        if x.is_null() || y.is_null() {
            return null_argument("x and y");
        }
        if rows == 0 || cols == 0 {
            set_error("rows and cols must both be positive");
            return DoicrStatus::InvalidArgument;
        }
        let xs = unsafe { std::slice::from_raw_parts(x, rows * cols) };
        let ys = unsafe { std::slice::from_raw_parts(y, rows) };
        let matrix = match Matrix::from_vec(rows, cols, xs.to_vec()) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let inner = Dataset {
            x: matrix,
            y: ys.to_vec(),
            feature_names: (1..=cols).map(|i| format!("x{i}")).collect(),
            target_name: "y".to_string(),
        };
        unsafe { *out = Box::into_raw(Box::new(DoicrDataset { inner })) };
        DoicrStatus::Ok
    })
}

/// Draws the built-in heteroscedastic synthetic dataset.
///
/// # Safety
/// `out` must be a valid pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn doicr_dataset_synth(
    n: usize,
    dims: usize,
    seed: u64,
    out: *mut *mut DoicrDataset,
) -> DoicrStatus {
    boundary(|| {
        if out.is_null() {
            return null_argument("out");
        }
        match synth_heteroscedastic(n, dims, seed) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(DoicrDataset { inner })) };
                DoicrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn doicr_dataset_rows(dataset: *const DoicrDataset) -> usize {
    if dataset.is_null() {
        return 0;
    }
    unsafe { (*dataset).inner.len() }
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `dataset` must be null or a live handle; it is dead afterwards.
#[no_mangle]
pub unsafe extern "C" fn doicr_dataset_free(dataset: *mut DoicrDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

fn parse_method(raw: &str) -> Result<Method, Error> {
    match raw {
        "icp" => Ok(Method::Traditional),
        other => Method::from_str(other),
    }
}

fn train_calibrated(
    data: &Dataset,
    method: Method,
    confidence_level: f64,
    seed: u64,
    epochs: usize,
) -> Result<CalibratedModel, Error> {
    if !(confidence_level > 0.0 && confidence_level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level must lie strictly between 0 and 1, got {confidence_level}"
        )));
    }
    let scheme = if method.uses_calibration() {
        SplitScheme::IcpFamily
    } else {
        SplitScheme::QdSoft
    };
    let splits = make_splits(data.len(), scheme, seed)?;
    let (std_data, standardization) = data.standardize(&splits.train)?;
    let (train_x, train_y) = std_data.select(&splits.train);

    let mut config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if epochs > 0 {
        config.epochs = epochs;
    }
    config.loss.epsilon = 1.0 - confidence_level;

    let (model, _) = trainer::train(method, &train_x, &train_y, &config)?;
    let q = if method.uses_calibration() {
        let (cal_x, cal_y) = std_data.select(&splits.cal);
        let (m, sigma) = model.point_and_scale(&cal_x)?;
        let alphas = doicr::conformal::ncm_scores(&cal_y, &m, &sigma)?;
        let quantile =
            doicr::conformal::conformal_quantile(alphas.as_slice(), config.loss.epsilon)?;
        quantile.q.is_finite().then_some(quantile.q)
    } else {
        None
    };
    Ok(CalibratedModel {
        bundle: ModelBundle {
            format_version: BUNDLE_FORMAT_VERSION,
            method,
            epsilon: config.loss.epsilon,
            model,
            standardization,
        },
        q,
    })
}

/// Trains `method` ("doicr", "scpo", "qdsoft", "traditional" or the alias
/// "icp") on the dataset at the given confidence level and seed, running
/// the full split/standardize/train/calibrate pipeline. `epochs` of 0 uses
/// the default (1000).
///
/// # Safety
/// `dataset` must be a live handle, `method` a NUL-terminated string and
/// `out` a valid pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn doicr_train(
    dataset: *const DoicrDataset,
    method: *const c_char,
    confidence_level: f64,
    seed: u64,
    epochs: usize,
    out: *mut *mut DoicrModel,
) -> DoicrStatus {
    boundary(|| {
        if out.is_null() {
            return null_argument("out");
        }
        if dataset.is_null() {
            return null_argument("dataset");
        }
        if method.is_null() {
            return null_argument("method");
        }
        let raw = match unsafe { CStr::from_ptr(method) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("method is not valid UTF-8");
                return DoicrStatus::InvalidArgument;
            }
        };
        let method = match parse_method(raw) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let data = unsafe { &(*dataset).inner };
        match train_calibrated(data, method, confidence_level, seed, epochs) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(DoicrModel { inner })) };
                DoicrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

impl CalibratedModel {
    /// Interval bounds in original units for a raw feature matrix.
    fn intervals_raw(&self, x_raw: &Matrix) -> Result<(Vec<f64>, Vec<f64>), Error> {
        let std = &self.bundle.standardization;
        let xs = std.apply(x_raw)?;
        let (lower, upper) = match &self.bundle.model {
            TrainedModel::Bounds { .. } => self.bundle.model.bounds(&xs)?,
            _ => {
                let (m, sigma) = self.bundle.model.point_and_scale(&xs)?;
                let q = self.q.unwrap_or(f64::INFINITY);
                m.iter()
                    .zip(&sigma)
                    .map(|(&m, &s)| (m - q * s, m + q * s))
                    .unzip()
            }
        };
        Ok((
            lower.into_iter().map(|v| std.invert_target(v)).collect(),
            upper.into_iter().map(|v| std.invert_target(v)).collect(),
        ))
    }
}

/// Predicts interval bounds for a row-major `rows x cols` feature array in
/// the data's original units, filling `lower` and `upper` (each of length
/// `rows`). Unbounded intervals come out as infinities.
///
/// # Safety
/// `model` must be a live handle; `x` must point to `rows * cols` doubles;
/// `lower` and `upper` must each have room for `rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn doicr_model_predict(
    model: *const DoicrModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    lower: *mut f64,
    upper: *mut f64,
) -> DoicrStatus {
    boundary(|| {
        if model.is_null() {
            return null_argument("model");
        }
        if x.is_null() || lower.is_null() || upper.is_null() {
            return null_argument("x, lower and upper");
        }
        if rows == 0 || cols == 0 {
            set_error("rows and cols must both be positive");
            return DoicrStatus::InvalidArgument;
        }
        let xs = unsafe { std::slice::from_raw_parts(x, rows * cols) };
        let matrix = match Matrix::from_vec(rows, cols, xs.to_vec()) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let inner = unsafe { &(*model).inner };
        match inner.intervals_raw(&matrix) {
            Ok((lo, hi)) => {
                unsafe {
                    std::slice::from_raw_parts_mut(lower, rows).copy_from_slice(&lo);
                    std::slice::from_raw_parts_mut(upper, rows).copy_from_slice(&hi);
                }
                DoicrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Scores the model on a dataset, writing coverage and mean width (in
/// original units) to `out`.
///
/// # Safety
/// `model` and `test` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn doicr_model_evaluate(
    model: *const DoicrModel,
    test: *const DoicrDataset,
    out: *mut DoicrMetrics,
) -> DoicrStatus {
    boundary(|| {
        if model.is_null() {
            return null_argument("model");
        }
        if test.is_null() {
            return null_argument("test");
        }
        if out.is_null() {
            return null_argument("out");
        }
        let inner = unsafe { &(*model).inner };
        let data = unsafe { &(*test).inner };
        let (lower, upper) = match inner.intervals_raw(&data.x) {
            Ok(pair) => pair,
            Err(e) => return fail(&e),
        };
        let n = data.y.len();
        let covered = data
            .y
            .iter()
            .zip(lower.iter().zip(&upper))
            .filter(|(y, (lo, hi))| lo <= y && *y <= hi)
            .count();
        let width: f64 = lower.iter().zip(&upper).map(|(lo, hi)| hi - lo).sum();
        let mpiw = width / n as f64;
        unsafe {
            *out = DoicrMetrics {
                picp: covered as f64 / n as f64,
                mpiw,
                n,
                unbounded: !mpiw.is_finite(),
            };
        }
        DoicrStatus::Ok
    })
}

/// Writes the model as JSON to `path`.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn doicr_model_save(
    model: *const DoicrModel,
    path: *const c_char,
) -> DoicrStatus {
    boundary(|| {
        if model.is_null() {
            return null_argument("model");
        }
        if path.is_null() {
            return null_argument("path");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("path is not valid UTF-8");
                return DoicrStatus::InvalidArgument;
            }
        };
        let inner = unsafe { &(*model).inner };
        let write = || -> Result<(), Error> {
            let json = serde_json::to_string_pretty(inner)?;
            std::fs::write(Path::new(path), json)?;
            Ok(())
        };
        match write() {
            Ok(()) => DoicrStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Loads a model previously written by [`doicr_model_save`], or a bare
/// training bundle such as the CLI's `model.json`. A bare bundle carries no
/// conformal quantile: direct-bounds models predict normally, scale-family
/// models come back unbounded.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn doicr_model_load(
    path: *const c_char,
    out: *mut *mut DoicrModel,
) -> DoicrStatus {
    boundary(|| {
        if out.is_null() {
            return null_argument("out");
        }
        if path.is_null() {
            return null_argument("path");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("path is not valid UTF-8");
                return DoicrStatus::InvalidArgument;
            }
        };
        let read = || -> Result<CalibratedModel, Error> {
            let raw = std::fs::read_to_string(Path::new(path))?;
            let inner = match serde_json::from_str::<CalibratedModel>(&raw) {
                Ok(inner) => inner,
                Err(saved_err) => match serde_json::from_str::<ModelBundle>(&raw) {
                    Ok(bundle) => CalibratedModel { bundle, q: None },
                    Err(bundle_err) => {
                        return Err(Error::Checkpoint(format!(
                            "neither a saved model ({saved_err}) nor a training bundle ({bundle_err})"
                        )))
                    }
                },
            };
            if inner.bundle.format_version != BUNDLE_FORMAT_VERSION {
                return Err(Error::Checkpoint(format!(
                    "bundle format {} is not supported (expected {BUNDLE_FORMAT_VERSION})",
                    inner.bundle.format_version
                )));
            }
            Ok(inner)
        };
        match read() {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(DoicrModel { inner })) };
                DoicrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle; it is dead afterwards.
#[no_mangle]
pub unsafe extern "C" fn doicr_model_free(model: *mut DoicrModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}
