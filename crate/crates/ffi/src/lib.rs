//! C ABI over the core toolkit: images, the codec simulator, quality
//! metrics, the degradation index and trained enhancement models.
//!
//! Every fallible function returns a [`DcqeStatus`]; on failure a message is
//! kept per thread and can be read with [`dcqe_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dcqe::codec::{encode_decode, CodecConfig};
use dcqe::image::{load_pnm, save_pnm, ImageBuffer};
use dcqe::metrics::{degradation_index, psnr, ssim, MetricSeries, Orientation};
use dcqe::models::{load_checkpoint, FixedModel, Model};
use dcqe::training::Distance;
use dcqe::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcqeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Argument values are out of range or inconsistent.
    InvalidArgument = 2,
    Io = 3,
    /// Malformed PNM or checkpoint data.
    Format = 4,
    /// Dimensions of two inputs disagree.
    ShapeMismatch = 5,
    /// Computation produced or met a non-finite value.
    NonFinite = 6,
    /// The caller's buffer is too small; nothing was written.
    BufferTooSmall = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 99,
}

/// A single- or three-channel image with samples in `[0, 1]`.
pub struct DcqeImage(ImageBuffer);

/// A trained enhancement model loaded from a checkpoint.
pub struct DcqeModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior nul"));
}

fn status_of(e: &Error) -> DcqeStatus {
    match e {
        Error::Io { .. } => DcqeStatus::Io,
        Error::Pnm { .. } | Error::Checkpoint(_) => DcqeStatus::Format,
        Error::ShapeMismatch { .. } => DcqeStatus::ShapeMismatch,
        Error::NonFinite(_) => DcqeStatus::NonFinite,
        _ => DcqeStatus::InvalidArgument,
    }
}

fn fail(status: DcqeStatus, msg: impl Into<String>) -> DcqeStatus {
    set_error(msg);
    status
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), DcqeStatus>) -> DcqeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DcqeStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(DcqeStatus::Internal, "internal panic"),
    }
}

fn check<T>(r: dcqe::Result<T>) -> Result<T, DcqeStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, DcqeStatus> {
    p.as_ref()
        .ok_or_else(|| fail(DcqeStatus::NullArgument, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, DcqeStatus> {
    p.as_mut()
        .ok_or_else(|| fail(DcqeStatus::NullArgument, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, DcqeStatus> {
    if p.is_null() {
        return Err(fail(DcqeStatus::NullArgument, "path is null"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(DcqeStatus::InvalidArgument, "path is not valid UTF-8")),
    }
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn dcqe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the last failure on this thread; empty after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dcqe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Copies `height·width·channels` interleaved samples into a new image.
///
/// # Safety
/// `samples` must point to that many readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcqe_image_new(
    height: usize,
    width: usize,
    channels: usize,
    samples: *const f64,
    out: *mut *mut DcqeImage,
) -> DcqeStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        if samples.is_null() {
            return Err(fail(DcqeStatus::NullArgument, "samples is null"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| fail(DcqeStatus::InvalidArgument, "image size overflows"))?;
        let data = std::slice::from_raw_parts(samples, n).to_vec();
        *out = boxed(DcqeImage(check(ImageBuffer::new(height, width, channels, data))?));
        Ok(())
    })
}

/// Reads a binary PGM (P5) or PPM (P6) file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcqe_image_read_pnm(path: *const c_char, out: *mut *mut DcqeImage) -> DcqeStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let img = check(load_pnm(&path_arg(path)?))?;
        *out = boxed(DcqeImage(img));
        Ok(())
    })
}

/// Writes the image as P5 or P6 with byte rounding.
///
/// # Safety
/// `image` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dcqe_image_write_pnm(image: *const DcqeImage, path: *const c_char) -> DcqeStatus {
    guard(|| {
        let img = deref(image, "image")?;
        check(save_pnm(&path_arg(path)?, &img.0))
    })
}

/// # Safety
/// `image` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn dcqe_image_dims(
    image: *const DcqeImage,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> DcqeStatus {
    guard(|| {
        let img = &deref(image, "image")?.0;
        for (p, v) in [(height, img.height()), (width, img.width()), (channels, img.channels())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the interleaved samples into `buffer` of `len` doubles.
///
/// # Safety
/// `image` must be a live handle; `buffer` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dcqe_image_samples(image: *const DcqeImage, buffer: *mut f64, len: usize) -> DcqeStatus {
    guard(|| {
        let img = &deref(image, "image")?.0;
        if buffer.is_null() {
            return Err(fail(DcqeStatus::NullArgument, "buffer is null"));
        }
        let s = img.samples();
        if len < s.len() {
            return Err(fail(
                DcqeStatus::BufferTooSmall,
                format!("need {} samples, buffer holds {len}", s.len()),
            ));
        }
        ptr::copy_nonoverlapping(s.as_ptr(), buffer, s.len());
        Ok(())
    })
}

/// # Safety
/// `image` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dcqe_image_free(image: *mut DcqeImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Compresses and decompresses with the block codec at `quality` (1–100).
///
/// # Safety
/// `image` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcqe_codec_round_trip(image: *const DcqeImage, quality: i32, out: *mut *mut DcqeImage) -> DcqeStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let img = deref(image, "image")?;
        let cfg = check(CodecConfig::new(quality as i64))?;
        *out = boxed(DcqeImage(check(encode_decode(&img.0, &cfg))?));
        Ok(())
    })
}

/// PSNR in dB; `INFINITY` for identical images.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcqe_psnr(a: *const DcqeImage, b: *const DcqeImage, out: *mut f64) -> DcqeStatus {
    guard(|| {
        let v = check(psnr(&deref(a, "a")?.0, &deref(b, "b")?.0))?;
        *out_ptr(out, "out")? = v;
        Ok(())
    })
}

/// Single-scale SSIM (11×11 Gaussian window, σ = 1.5).
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcqe_ssim(a: *const DcqeImage, b: *const DcqeImage, out: *mut f64) -> DcqeStatus {
    guard(|| {
        let v = check(ssim(&deref(a, "a")?.0, &deref(b, "b")?.0))?;
        *out_ptr(out, "out")? = v;
        Ok(())
    })
}

/// Degradation index of `values[0..len]` (cycles 1..n) in percent per
/// cycle. `higher_is_better` selects the orientation.
///
/// # Safety
/// `values` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcqe_degradation_index(
    values: *const f64,
    len: usize,
    higher_is_better: bool,
    out: *mut f64,
) -> DcqeStatus {
    guard(|| {
        if values.is_null() {
            return Err(fail(DcqeStatus::NullArgument, "values is null"));
        }
        let orientation = if higher_is_better {
            Orientation::HigherBetter
        } else {
            Orientation::LowerBetter
        };
        let series = MetricSeries::new("series", orientation, std::slice::from_raw_parts(values, len).to_vec());
        let v = degradation_index(&series).map_err(|e| fail(DcqeStatus::InvalidArgument, e.to_string()))?;
        *out_ptr(out, "out")? = v;
        Ok(())
    })
}

/// Loads a model checkpoint written by the `train` command.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcqe_model_load(path: *const c_char, out: *mut *mut DcqeModel) -> DcqeStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        *out = boxed(DcqeModel(check(load_checkpoint(&path_arg(path)?))?));
        Ok(())
    })
}

/// One enhancement pass, clamped to `[0, 1]`.
///
/// # Safety
/// `model` and `image` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcqe_model_enhance(
    model: *const DcqeModel,
    image: *const DcqeImage,
    out: *mut *mut DcqeImage,
) -> DcqeStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let m = &deref(model, "model")?.0;
        let img = &deref(image, "image")?.0;
        *out = boxed(DcqeImage(check(m.enhance_image(img))?));
        Ok(())
    })
}

/// Mean absolute change `D(F(x), x)` of one unclamped enhancement pass.
///
/// # Safety
/// `model` and `image` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcqe_model_drift(model: *const DcqeModel, image: *const DcqeImage, out: *mut f64) -> DcqeStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let img = &deref(image, "image")?.0;
        let v = check(dcqe::metrics::drift(&FixedModel(m), img, Distance::L1))?;
        *out_ptr(out, "out")? = v;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dcqe_model_free(model: *mut DcqeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
