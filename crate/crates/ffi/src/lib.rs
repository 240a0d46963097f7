//! C ABI over gradstop. Every fallible call returns a `GsStatus`; the message
//! of the last failure on the calling thread is available from
//! `gs_last_error`. Images are row-major `double` buffers in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gradstop::imgcore::{psnr, Image};
use gradstop::model::{restore, ModelFile};
use gradstop::spectral::contrast_factor;
use gradstop::{stopping, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SizeMismatch = 3,
    Diverged = 4,
    Parse = 5,
    Dataset = 6,
    Io = 7,
    Panic = 8,
}

/// A trained model loaded from a model file.
pub struct GsModel {
    inner: ModelFile,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> GsStatus {
    match e {
        Error::InvalidArgument(_) => GsStatus::InvalidArgument,
        Error::SizeMismatch { .. } => GsStatus::SizeMismatch,
        Error::Diverged { .. } => GsStatus::Diverged,
        Error::Parse { .. } => GsStatus::Parse,
        Error::Dataset(_) => GsStatus::Dataset,
        Error::Io { .. } => GsStatus::Io,
    }
}

/// Runs `f`, recording errors and catching panics at the boundary.
fn guard(f: impl FnOnce() -> Result<(), GsStatus>) -> GsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            GsStatus::Panic
        }
    }
}

fn fail(e: Error) -> GsStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> GsStatus {
    set_error(format!("{what} is null"));
    GsStatus::NullPointer
}

/// Copies the last error message of this thread into `buf` (nul-terminated,
/// truncated to `len`). Returns the full message length without the nul.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gs_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: the caller guarantees `buf` holds `len >= n + 1` bytes
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Loads a model file. On success `*out` owns a handle to release with
/// `gs_model_free`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_model_load(path: *const c_char, out: *mut *mut GsModel) -> GsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null; the caller guarantees nul termination
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(Error::InvalidArgument("path is not UTF-8".into())))?;
        let inner = ModelFile::load(Path::new(path)).map_err(fail)?;
        // SAFETY: checked non-null
        unsafe { *out = Box::into_raw(Box::new(GsModel { inner })) };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from `gs_model_load` not freed before.
#[no_mangle]
pub unsafe extern "C" fn gs_model_free(model: *mut GsModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_model_stop_time(model: *const GsModel, out: *mut f64) -> GsStatus {
    guard(|| {
        // SAFETY: the caller guarantees a live handle or null
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null
        unsafe { *out = m.inner.stop_time() };
        Ok(())
    })
}

/// Trained depth `S` and number of experts.
///
/// # Safety
/// `model` must be a live handle; `depth` and `num_kernels` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gs_model_shape(model: *const GsModel, depth: *mut usize, num_kernels: *mut usize) -> GsStatus {
    guard(|| {
        // SAFETY: the caller guarantees a live handle or null
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if depth.is_null() || num_kernels.is_null() {
            return Err(null("output pointer"));
        }
        // SAFETY: checked non-null
        unsafe {
            *depth = m.inner.depth;
            *num_kernels = m.inner.bank().len();
        }
        Ok(())
    })
}

/// Runs the model's flow on `input` to `stop_time` (a negative value or NaN
/// picks the trained one) and writes `width * height` values to `output`.
///
/// # Safety
/// `input` and `output` must be valid for `width * height` doubles.
#[no_mangle]
pub unsafe extern "C" fn gs_restore(
    model: *const GsModel,
    width: usize,
    height: usize,
    input: *const f64,
    stop_time: f64,
    output: *mut f64,
) -> GsStatus {
    guard(|| {
        // SAFETY: the caller guarantees a live handle or null
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if input.is_null() || output.is_null() {
            return Err(null("image buffer"));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| fail(Error::InvalidArgument("image size overflows".into())))?;
        // SAFETY: the caller guarantees `n` readable doubles
        let data = unsafe { std::slice::from_raw_parts(input, n) }.to_vec();
        let img = Image::from_vec(width, height, data).map_err(fail)?;
        let t = (stop_time >= 0.0).then_some(stop_time);
        let out = restore(&m.inner, &img, t).map_err(fail)?;
        // SAFETY: the caller guarantees `n` writable doubles
        unsafe { std::ptr::copy_nonoverlapping(out.data().as_ptr(), output, n) };
        Ok(())
    })
}

/// PSNR in decibels of two buffers of `len` values.
///
/// # Safety
/// `a` and `b` must be valid for `len` doubles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_psnr(a: *const f64, b: *const f64, len: usize, peak: f64, out: *mut f64) -> GsStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        // SAFETY: the caller guarantees `len` readable doubles in each
        let (a, b) = unsafe { (std::slice::from_raw_parts(a, len), std::slice::from_raw_parts(b, len)) };
        let ia = Image::from_slice(a).map_err(fail)?;
        let ib = Image::from_slice(b).map_err(fail)?;
        let v = psnr(&ia, &ib, peak).map_err(fail)?;
        // SAFETY: checked non-null
        unsafe { *out = v };
        Ok(())
    })
}

/// Per-step intensity multiplier `1 - lambda T / S`.
#[no_mangle]
pub extern "C" fn gs_contrast_factor(lambda: f64, stop_time: f64, depth: usize) -> f64 {
    contrast_factor(lambda, stop_time, depth)
}

/// Optimal stopping time of the two-dimensional toy problem on its grid.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_toy2d_stop_time(out: *mut f64) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let report = stopping::run_toy2d().map_err(fail)?;
        // SAFETY: checked non-null
        unsafe { *out = report.t_bar };
        Ok(())
    })
}
