//! C ABI over the greaten model.
//!
//! Every entry point returns a [`GreatenStatus`]. On failure the message is
//! kept per thread and read back with [`greaten_last_error_message`].
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use greaten::checkpoint;
use greaten::loss::RegionMetrics;
use greaten::model::{predict, Model, ModelInput};
use greaten::synthdata::io::{read_sample, write_pfm};
use greaten::synthdata::{generate_scene, SceneConfig, StereoSample};
use greaten::train::{evaluate, prior_for};
use greaten::{Error, FloatMap, ParamStore};
use rand::SeedableRng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GreatenStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Shape = 5,
    Checkpoint = 6,
    Internal = 7,
}

/// A loaded model and its parameters.
pub struct GreatenModel {
    model: Model,
    params: ParamStore,
}

/// A stereo pair with ground truth.
pub struct GreatenSample(StereoSample);

/// A full-resolution disparity map.
pub struct GreatenDisparity(FloatMap);

/// Metrics over all valid pixels. `epe_noc` and `epe_occ` are NaN when the
/// region is empty; percentages count pixels above 0.5, 1, 2 and 3 px.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct GreatenMetrics {
    pub valid_pixels: u64,
    pub epe: f64,
    pub bad: [f64; 4],
    pub epe_noc: f64,
    pub epe_occ: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(GreatenStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => GreatenStatus::Config,
            Error::Shape { .. } | Error::SizeMismatch { .. } => GreatenStatus::Shape,
            Error::Checkpoint(_) => GreatenStatus::Checkpoint,
            Error::Io(_) | Error::MissingFile(_) | Error::Malformed { .. } | Error::Json(_) | Error::Image(_) => {
                GreatenStatus::Io
            }
            Error::Degenerate(_) | Error::EmptyRegion(_) | Error::NonFinite { .. } => GreatenStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(GreatenStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GreatenStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GreatenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GreatenStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            GreatenStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn greaten_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (truncated and
/// NUL-terminated when `len > 0`). Returns the full message length in bytes,
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn greaten_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Load a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn greaten_model_load(dir: *const c_char, out: *mut *mut GreatenModel) -> GreatenStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let (model, params, _) = checkpoint::load_model(&dir)?;
        put(out, GreatenModel { model, params })
    })
}

/// # Safety
/// `model` must be null or a handle from [`greaten_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn greaten_model_free(model: *mut GreatenModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Render a synthetic scene with default geometry and textures.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn greaten_sample_generate(
    height: u32,
    width: u32,
    max_disparity: u32,
    seed: u64,
    out: *mut *mut GreatenSample,
) -> GreatenStatus {
    guard(|| {
        let sample = generate_scene(&SceneConfig {
            height: height as usize,
            width: width as usize,
            max_disparity,
            seed,
            ..SceneConfig::default()
        })?;
        put(out, GreatenSample(sample))
    })
}

/// Read a sample directory as written by `greaten gen-data`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn greaten_sample_load(dir: *const c_char, out: *mut *mut GreatenSample) -> GreatenStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        put(out, GreatenSample(read_sample(&dir)?))
    })
}

/// # Safety
/// `sample` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn greaten_sample_dims(
    sample: *const GreatenSample,
    height: *mut u32,
    width: *mut u32,
) -> GreatenStatus {
    guard(|| {
        let s = &get(sample, "sample")?.0;
        if height.is_null() || width.is_null() {
            return Err(null("dimension output"));
        }
        *height = s.height() as u32;
        *width = s.disparity_gt.width as u32;
        Ok(())
    })
}

/// # Safety
/// `sample` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn greaten_sample_free(sample: *mut GreatenSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Predict disparity for `sample`. `iters == 0` uses the model's
/// inference-time iteration count. `prior_seed` seeds the stub depth prior
/// for variants that consume one.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn greaten_infer(
    model: *const GreatenModel,
    sample: *const GreatenSample,
    iters: u32,
    prior_seed: u64,
    out: *mut *mut GreatenDisparity,
) -> GreatenStatus {
    guard(|| {
        let m = get(model, "model")?;
        let s = &get(sample, "sample")?.0;
        let iters = if iters == 0 {
            m.model.config.infer_iters
        } else {
            iters as usize
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(prior_seed);
        let prior = prior_for(&m.model, s, &mut rng)?;
        let (pred, _) = predict(&m.model, &m.params, &ModelInput::from_sample(s, prior), iters)?;
        put(out, GreatenDisparity(pred.final_disparity().clone()))
    })
}

/// # Safety
/// `disp` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn greaten_disparity_dims(
    disp: *const GreatenDisparity,
    height: *mut u32,
    width: *mut u32,
) -> GreatenStatus {
    guard(|| {
        let d = &get(disp, "disparity")?.0;
        if height.is_null() || width.is_null() {
            return Err(null("dimension output"));
        }
        *height = d.height as u32;
        *width = d.width as u32;
        Ok(())
    })
}

/// Copy the row-major map into `buf`, which must hold exactly
/// `height * width` floats.
///
/// # Safety
/// `buf` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn greaten_disparity_copy(
    disp: *const GreatenDisparity,
    buf: *mut f32,
    len: usize,
) -> GreatenStatus {
    guard(|| {
        let d = &get(disp, "disparity")?.0;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len != d.data.len() {
            return Err(invalid(format!("buffer holds {len} floats, map has {}", d.data.len())));
        }
        ptr::copy_nonoverlapping(d.data.as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `disp` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn greaten_disparity_write_pfm(
    disp: *const GreatenDisparity,
    path: *const c_char,
) -> GreatenStatus {
    guard(|| {
        let d = &get(disp, "disparity")?.0;
        write_pfm(&path_arg(path, "path")?, d)?;
        Ok(())
    })
}

/// # Safety
/// `disp` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn greaten_disparity_free(disp: *mut GreatenDisparity) {
    if !disp.is_null() {
        drop(Box::from_raw(disp));
    }
}

/// Run inference with the model's inference iteration count and score the
/// result against the sample's ground truth.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn greaten_evaluate(
    model: *const GreatenModel,
    sample: *const GreatenSample,
    prior_seed: u64,
    out: *mut GreatenMetrics,
) -> GreatenStatus {
    guard(|| {
        let m = get(model, "model")?;
        let s = &get(sample, "sample")?.0;
        if out.is_null() {
            return Err(null("metrics output"));
        }
        let report = evaluate(&m.model, &m.params, s, prior_seed)?;
        let all = report
            .all
            .as_ref()
            .ok_or_else(|| invalid("sample has no valid pixels"))?;
        let epe = |r: &Option<RegionMetrics>| r.as_ref().map_or(f64::NAN, |r| r.epe);
        let mut bad = [f64::NAN; 4];
        for (slot, t) in bad.iter_mut().zip(&all.bad) {
            *slot = t.percent;
        }
        *out = GreatenMetrics {
            valid_pixels: all.count as u64,
            epe: all.epe,
            bad,
            epe_noc: epe(&report.noc),
            epe_occ: epe(&report.occ),
        };
        Ok(())
    })
}
