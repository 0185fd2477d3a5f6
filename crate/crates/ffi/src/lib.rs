//! C ABI over `hipseg`.
//!
//! Objects are opaque handles created by the `hs_*_from_data`,
//! `hs_*_read` and `hs_*_load` functions and released with the matching
//! `hs_*_free`. Every fallible call returns an [`HsStatus`]; on failure a
//! description is available from [`hs_last_error_message`] on the same
//! thread.
//!
//! Arrays cross the boundary in C order: for a shape `(x, y, z)` the last
//! index varies fastest.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use hipseg::fusion::{segment_native, SegmentOptions};
use hipseg::io::{header_for, read_mask, read_volume, write_mask, LoadedVolume};
use hipseg::metrics::evaluate_volume;
use hipseg::network::NetworkEnsemble;
use hipseg::postprocess::{clean_mask, label_components, Connectivity};
use hipseg::training::load_ensemble;
use hipseg::volumes::{AxisCode, LabelMask, Volume};
use hipseg::Error;
use ndarray::Array3;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    /// Missing or unusable orientation metadata.
    Orientation = 4,
    /// A mask without foreground where one is required.
    EmptyData = 5,
    Io = 6,
    /// Malformed NIfTI, checkpoint or other file content.
    Format = 7,
    Training = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
}

/// A volume together with the header it was read from.
pub struct HsVolume {
    loaded: LoadedVolume,
}

pub struct HsMask {
    mask: LabelMask,
}

/// The three orientation networks.
pub struct HsEnsemble {
    ensemble: NetworkEnsemble,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsPredictOptions {
    /// Consensus threshold in (0, 1).
    pub threshold: f32,
    /// Connected components kept.
    pub keep: usize,
    /// 6 or 26.
    pub connectivity: u32,
    pub workers: usize,
    /// Treat volumes without orientation metadata as canonical.
    pub assume_canonical: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HsScores {
    pub dice_both: f64,
    pub dice_left: f64,
    pub dice_right: f64,
    pub precision: f64,
    pub recall: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &Error) -> HsStatus {
    match e {
        Error::ShapeMismatch { .. } => HsStatus::ShapeMismatch,
        Error::InvalidArgument(_) | Error::EmptySubset(_) => HsStatus::InvalidArgument,
        Error::Orientation { .. } => HsStatus::Orientation,
        Error::EmptyMask(_) => HsStatus::EmptyData,
        Error::Divergence { .. } => HsStatus::Training,
        Error::Io { .. } => HsStatus::Io,
        Error::Checkpoint(_) | Error::Nifti(_) | Error::Json(_) | Error::Csv(_) | Error::Image(_) => HsStatus::Format,
    }
}

/// Runs `f`, translating errors and panics into a status and a message.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> HsStatus {
    let (status, message) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (HsStatus::Ok, String::new()),
        Ok(Err(Failure::Null(what))) => (HsStatus::NullPointer, format!("{what} is null")),
        Ok(Err(Failure::Invalid(m))) => (HsStatus::InvalidArgument, m),
        Ok(Err(Failure::Core(e))) => (status_of(&e), e.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (HsStatus::Panic, format!("internal error: {msg}"))
        }
    };
    set_last_error(&message);
    status
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure::Invalid("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn shape_arg(shape: *const usize) -> Result<[usize; 3], Failure> {
    if shape.is_null() {
        return Err(Failure::Null("shape"));
    }
    let s = std::slice::from_raw_parts(shape, 3);
    Ok([s[0], s[1], s[2]])
}

fn connectivity(c: u32) -> Result<Connectivity, Failure> {
    match c {
        6 => Ok(Connectivity::Six),
        26 => Ok(Connectivity::TwentySix),
        other => Err(Failure::Invalid(format!("connectivity must be 6 or 26, got {other}"))),
    }
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message describing the last failed call on this thread; empty after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn hs_predict_options_default() -> HsPredictOptions {
    let d = SegmentOptions::default();
    HsPredictOptions {
        threshold: d.threshold,
        keep: d.keep,
        connectivity: 26,
        workers: d.workers,
        assume_canonical: false,
    }
}

/// Reads a NIfTI (`.nii`, `.nii.gz`) or raw volume.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_volume_read(path: *const c_char, out: *mut *mut HsVolume) -> HsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let loaded = read_volume(&path_arg(path)?)?;
        *out = boxed(HsVolume { loaded });
        Ok(())
    })
}

/// Copies `x*y*z` floats into a new volume in canonical orientation.
/// `spacing` may be null for 1 mm isotropic.
///
/// # Safety
/// `data` must hold `shape[0]*shape[1]*shape[2]` floats; `shape` three
/// values; `spacing` null or three values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_volume_from_data(
    data: *const f32,
    shape: *const usize,
    spacing: *const f64,
    out: *mut *mut HsVolume,
) -> HsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let shape = shape_arg(shape)?;
        if data.is_null() {
            return Err(Failure::Null("data"));
        }
        let n: usize = shape.iter().product();
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let array = Array3::from_shape_vec(shape, values).map_err(|e| Failure::Invalid(e.to_string()))?;
        let spacing = if spacing.is_null() {
            [1.0; 3]
        } else {
            let s = std::slice::from_raw_parts(spacing, 3);
            [s[0], s[1], s[2]]
        };
        let volume = Volume::new(array, spacing, Some(AxisCode::CANONICAL))?;
        let header = header_for(&volume);
        *out = boxed(HsVolume { loaded: LoadedVolume { volume, header } });
        Ok(())
    })
}

/// # Safety
/// `volume` must be a live handle; `shape` must have room for three values.
#[no_mangle]
pub unsafe extern "C" fn hs_volume_shape(volume: *const HsVolume, shape: *mut usize) -> HsStatus {
    guard(|| {
        let v = deref(volume, "volume")?;
        if shape.is_null() {
            return Err(Failure::Null("shape"));
        }
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&v.loaded.volume.shape());
        Ok(())
    })
}

/// # Safety
/// `volume` must come from this library and not be used afterwards; null
/// is ignored.
#[no_mangle]
pub unsafe extern "C" fn hs_volume_free(volume: *mut HsVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Copies `x*y*z` bytes into a new mask; nonzero is foreground.
///
/// # Safety
/// `data` must hold `shape[0]*shape[1]*shape[2]` bytes; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hs_mask_from_data(data: *const u8, shape: *const usize, out: *mut *mut HsMask) -> HsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let shape = shape_arg(shape)?;
        if data.is_null() {
            return Err(Failure::Null("data"));
        }
        let n: usize = shape.iter().product();
        let values = std::slice::from_raw_parts(data, n).iter().map(|&v| u8::from(v != 0)).collect();
        let array = Array3::from_shape_vec(shape, values).map_err(|e| Failure::Invalid(e.to_string()))?;
        *out = boxed(HsMask { mask: LabelMask::new(array)? });
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_mask_read(path: *const c_char, out: *mut *mut HsMask) -> HsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mask = read_mask(&path_arg(path)?)?;
        *out = boxed(HsMask { mask });
        Ok(())
    })
}

/// Writes `mask` as NIfTI on the grid of `reference`.
///
/// # Safety
/// Handles must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hs_mask_write(mask: *const HsMask, reference: *const HsVolume, path: *const c_char) -> HsStatus {
    guard(|| {
        let m = deref(mask, "mask")?;
        let r = deref(reference, "reference")?;
        if m.mask.shape() != r.loaded.volume.shape() {
            return Err(Error::ShapeMismatch {
                expected: r.loaded.volume.shape().to_vec(),
                actual: m.mask.shape().to_vec(),
            }
            .into());
        }
        write_mask(&path_arg(path)?, &m.mask, &r.loaded.header)?;
        Ok(())
    })
}

/// # Safety
/// `mask` must be a live handle; `shape` must have room for three values.
#[no_mangle]
pub unsafe extern "C" fn hs_mask_shape(mask: *const HsMask, shape: *mut usize) -> HsStatus {
    guard(|| {
        let m = deref(mask, "mask")?;
        if shape.is_null() {
            return Err(Failure::Null("shape"));
        }
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&m.mask.shape());
        Ok(())
    })
}

/// Number of foreground voxels.
///
/// # Safety
/// `mask` must be a live handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_mask_count(mask: *const HsMask, count: *mut usize) -> HsStatus {
    guard(|| {
        let m = deref(mask, "mask")?;
        *out_ptr(count, "count")? = m.mask.count();
        Ok(())
    })
}

/// Copies the mask (0 or 1 per voxel) into `buffer`, which must hold
/// exactly as many bytes as the mask has voxels.
///
/// # Safety
/// `mask` must be a live handle; `buffer` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hs_mask_copy_data(mask: *const HsMask, buffer: *mut u8, len: usize) -> HsStatus {
    guard(|| {
        let m = deref(mask, "mask")?;
        if buffer.is_null() {
            return Err(Failure::Null("buffer"));
        }
        let n = m.mask.data().len();
        if len != n {
            return Err(Failure::Invalid(format!("buffer holds {len} bytes, mask has {n} voxels")));
        }
        let dst = std::slice::from_raw_parts_mut(buffer, len);
        for (d, &s) in dst.iter_mut().zip(m.mask.data().iter()) {
            *d = s;
        }
        Ok(())
    })
}

/// # Safety
/// `mask` must come from this library and not be used afterwards; null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn hs_mask_free(mask: *mut HsMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Loads `sagittal.ckpt`, `coronal.ckpt` and `axial.ckpt` from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_ensemble_load(dir: *const c_char, out: *mut *mut HsEnsemble) -> HsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ensemble = load_ensemble(&path_arg(dir)?)?;
        *out = boxed(HsEnsemble { ensemble });
        Ok(())
    })
}

/// # Safety
/// `ensemble` must come from this library and not be used afterwards; null
/// is ignored.
#[no_mangle]
pub unsafe extern "C" fn hs_ensemble_free(ensemble: *mut HsEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// Segments `volume` and returns a mask on the volume's own grid.
/// `options` may be null for the defaults.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_predict(
    ensemble: *const HsEnsemble,
    volume: *const HsVolume,
    options: *const HsPredictOptions,
    out: *mut *mut HsMask,
) -> HsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let e = deref(ensemble, "ensemble")?;
        let v = deref(volume, "volume")?;
        let o = if options.is_null() { hs_predict_options_default() } else { *options };
        let segment_options = SegmentOptions {
            threshold: o.threshold,
            keep: o.keep,
            connectivity: connectivity(o.connectivity)?,
            workers: o.workers.max(1),
            ..SegmentOptions::default()
        };
        let (mask, _, _) = segment_native(&e.ensemble, &v.loaded.volume, &segment_options, o.assume_canonical)?;
        *out = boxed(HsMask { mask });
        Ok(())
    })
}

/// Dice, per-half Dice (halves split at `x/2` along `midline_axis`),
/// precision and recall of `pred` against `truth`.
///
/// # Safety
/// Handles must be live; `scores` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_evaluate(
    pred: *const HsMask,
    truth: *const HsMask,
    midline_axis: usize,
    scores: *mut HsScores,
) -> HsStatus {
    guard(|| {
        let p = deref(pred, "pred")?;
        let t = deref(truth, "truth")?;
        let out = out_ptr(scores, "scores")?;
        let r = evaluate_volume("", "", &p.mask, &t.mask, midline_axis)?;
        *out = HsScores {
            dice_both: r.dice_both,
            dice_left: r.dice_left,
            dice_right: r.dice_right,
            precision: r.precision,
            recall: r.recall,
        };
        Ok(())
    })
}

/// Dice coefficient of two masks; two empty masks score 1.
///
/// # Safety
/// Handles must be live; `dice` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_dice(a: *const HsMask, b: *const HsMask, dice: *mut f64) -> HsStatus {
    let mut scores = HsScores::default();
    let status = hs_evaluate(a, b, 0, &mut scores);
    if status == HsStatus::Ok {
        if dice.is_null() {
            return guard(|| Err(Failure::Null("dice")));
        }
        *dice = scores.dice_both;
    }
    status
}

/// Number of connected foreground components.
///
/// # Safety
/// `mask` must be a live handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_count_components(mask: *const HsMask, connectivity_: u32, count: *mut usize) -> HsStatus {
    guard(|| {
        let m = deref(mask, "mask")?;
        let c = connectivity(connectivity_)?;
        *out_ptr(count, "count")? = label_components(&m.mask, c).count();
        Ok(())
    })
}

/// New mask holding only the `keep` largest components of `mask`.
///
/// # Safety
/// `mask` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_keep_largest(
    mask: *const HsMask,
    keep: usize,
    connectivity_: u32,
    out: *mut *mut HsMask,
) -> HsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = deref(mask, "mask")?;
        let kept = clean_mask(&m.mask, keep, connectivity(connectivity_)?);
        *out = boxed(HsMask { mask: kept });
        Ok(())
    })
}
