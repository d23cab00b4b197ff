//! C ABI over the stainseg library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_build`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`StainsegStatus`]; on failure a message is available from
//! [`stainseg_last_error`] on the same thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use stainseg::metrics;
use stainseg::postprocess::{self, MarkerDepth, PostprocessParams};
use stainseg::stain::{self, NormalizationParams, ReferenceProfile};
use stainseg::tta::PadPolicy;
use stainseg::{FloatMap, InstanceLabelMap, RgbImage};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StainsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Stain estimation or normalization failed.
    StainFailure = 3,
    PostprocessFailure = 4,
    DimensionMismatch = 5,
    /// A Rust panic was caught at the boundary.
    InternalError = 99,
}

/// 8-bit interleaved RGB image.
pub struct StainsegImage(RgbImage);

/// Reference stain profile.
pub struct StainsegProfile(ReferenceProfile);

/// Instance label map (0 = background).
pub struct StainsegLabelMap(InstanceLabelMap);

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct StainsegNormalizationParams {
    pub io: f64,
    pub beta: f64,
    pub alpha: f64,
    pub sat_percentile: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct StainsegPostprocessParams {
    pub prob_threshold: f64,
    pub gaussian_sigma: f64,
    /// Marker depth; a fraction of the distance range when `marker_h_relative`
    /// is non-zero, distance units otherwise.
    pub marker_h: f64,
    pub marker_h_relative: i32,
    pub min_instance_area: usize,
    pub opening_radius: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct StainsegMetrics {
    pub dice: f64,
    pub aji: f64,
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(StainsegStatus, String);

fn fail(status: StainsegStatus, e: impl std::fmt::Display) -> Failure {
    Failure(status, e.to_string())
}

fn null(what: &str) -> Failure {
    Failure(StainsegStatus::NullPointer, format!("{what} is null"))
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StainsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            StainsegStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            StainsegStatus::InternalError
        }
    }
}

unsafe fn slice<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn norm_params(p: *const StainsegNormalizationParams) -> Result<NormalizationParams, Failure> {
    let params = match p.as_ref() {
        None => NormalizationParams::default(),
        Some(p) => NormalizationParams {
            io: p.io,
            beta: p.beta,
            alpha: p.alpha,
            sat_percentile: p.sat_percentile,
            ..NormalizationParams::default()
        },
    };
    params.validate().map_err(|e| fail(StainsegStatus::InvalidArgument, e))?;
    Ok(params)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn stainseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn stainseg_normalization_params_default() -> StainsegNormalizationParams {
    let d = NormalizationParams::default();
    StainsegNormalizationParams { io: d.io, beta: d.beta, alpha: d.alpha, sat_percentile: d.sat_percentile }
}

#[no_mangle]
pub extern "C" fn stainseg_postprocess_params_default() -> StainsegPostprocessParams {
    let d = PostprocessParams::default();
    let (marker_h, relative) = match d.marker_h {
        MarkerDepth::Relative(h) => (h, 1),
        MarkerDepth::Absolute(h) => (h, 0),
    };
    StainsegPostprocessParams {
        prob_threshold: d.prob_threshold,
        gaussian_sigma: d.gaussian_sigma,
        marker_h,
        marker_h_relative: relative,
        min_instance_area: d.min_instance_area,
        opening_radius: d.opening_radius,
    }
}

/// Copy `len = width * height * 3` bytes of interleaved RGB into a new image.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stainseg_image_new(
    width: usize,
    height: usize,
    data: *const u8,
    len: usize,
    out: *mut *mut StainsegImage,
) -> StainsegStatus {
    guard(|| {
        let bytes = slice(data, len, "data")?;
        let img = RgbImage::new(width, height, bytes.to_vec()).map_err(|e| fail(StainsegStatus::InvalidArgument, e))?;
        store(out, StainsegImage(img))
    })
}

/// # Safety
/// `img` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn stainseg_image_free(img: *mut StainsegImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// # Safety
/// `img` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn stainseg_image_width(img: *const StainsegImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.width())
}

/// # Safety
/// `img` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn stainseg_image_height(img: *const StainsegImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.height())
}

/// Copy the pixels into `buf`, which must hold exactly width * height * 3 bytes.
///
/// # Safety
/// `img` must be a valid handle and `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn stainseg_image_copy_data(
    img: *const StainsegImage,
    buf: *mut u8,
    len: usize,
) -> StainsegStatus {
    guard(|| {
        let img = handle(img, "image")?;
        let data = img.0.data();
        if len != data.len() {
            return Err(Failure(
                StainsegStatus::InvalidArgument,
                format!("buffer holds {len} bytes, image has {}", data.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, len);
        Ok(())
    })
}

/// Estimate a reference profile from `img`. `params` may be null for defaults.
///
/// # Safety
/// `img` must be a valid handle, `source_id` a NUL-terminated UTF-8 string,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stainseg_profile_build(
    img: *const StainsegImage,
    source_id: *const c_char,
    params: *const StainsegNormalizationParams,
    out: *mut *mut StainsegProfile,
) -> StainsegStatus {
    guard(|| {
        let img = handle(img, "image")?;
        let id = c_str(source_id, "source_id")?;
        let params = norm_params(params)?;
        let profile =
            stain::build_reference_profile(&img.0, id, &params).map_err(|e| fail(StainsegStatus::StainFailure, e))?;
        store(out, StainsegProfile(profile))
    })
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|e| fail(StainsegStatus::InvalidArgument, format!("{what}: {e}")))
}

/// # Safety
/// `json` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stainseg_profile_from_json(
    json: *const c_char,
    out: *mut *mut StainsegProfile,
) -> StainsegStatus {
    guard(|| {
        let text = c_str(json, "json")?;
        let profile = ReferenceProfile::from_json(text).map_err(|e| fail(StainsegStatus::InvalidArgument, e))?;
        store(out, StainsegProfile(profile))
    })
}

/// Serialize a profile. Release the string with [`stainseg_string_free`].
///
/// # Safety
/// `profile` must be a valid handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stainseg_profile_to_json(
    profile: *const StainsegProfile,
    out: *mut *mut c_char,
) -> StainsegStatus {
    guard(|| {
        let profile = handle(profile, "profile")?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let text = CString::new(profile.0.to_json()).map_err(|e| fail(StainsegStatus::InternalError, e))?;
        *out = text.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn stainseg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `profile` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn stainseg_profile_free(profile: *mut StainsegProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

/// Normalize `img` to the reference. `params` may be null for defaults.
///
/// # Safety
/// Handles must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stainseg_normalize(
    img: *const StainsegImage,
    reference: *const StainsegProfile,
    params: *const StainsegNormalizationParams,
    out: *mut *mut StainsegImage,
) -> StainsegStatus {
    guard(|| {
        let img = handle(img, "image")?;
        let reference = handle(reference, "reference")?;
        let params = norm_params(params)?;
        let normalized = stain::normalize_to_reference(&img.0, &reference.0, &params)
            .map_err(|e| fail(StainsegStatus::StainFailure, e))?;
        store(out, StainsegImage(normalized))
    })
}

/// Side of the square a `width` x `height` tile is padded to: 1024, or the
/// next multiple of 32 for larger tiles.
#[no_mangle]
pub extern "C" fn stainseg_auto_pad_side(width: usize, height: usize) -> usize {
    PadPolicy::Auto.side(width, height).unwrap_or(0)
}

/// Copy `width * height` labels into a new label map.
///
/// # Safety
/// `labels` must point to `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stainseg_label_map_new(
    width: usize,
    height: usize,
    labels: *const u32,
    len: usize,
    out: *mut *mut StainsegLabelMap,
) -> StainsegStatus {
    guard(|| {
        let labels = slice(labels, len, "labels")?;
        let map = InstanceLabelMap::new(width, height, labels.to_vec())
            .map_err(|e| fail(StainsegStatus::InvalidArgument, e))?;
        store(out, StainsegLabelMap(map))
    })
}

/// # Safety
/// `map` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn stainseg_label_map_free(map: *mut StainsegLabelMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// # Safety
/// `map` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn stainseg_label_map_width(map: *const StainsegLabelMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.width())
}

/// # Safety
/// `map` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn stainseg_label_map_height(map: *const StainsegLabelMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.height())
}

/// Number of distinct instances.
///
/// # Safety
/// `map` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn stainseg_label_map_count(map: *const StainsegLabelMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.instance_ids().len())
}

/// Copy the labels into `buf`, which must hold exactly width * height values.
///
/// # Safety
/// `map` must be a valid handle and `buf` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn stainseg_label_map_copy(
    map: *const StainsegLabelMap,
    buf: *mut u32,
    len: usize,
) -> StainsegStatus {
    guard(|| {
        let map = handle(map, "label map")?;
        let labels = map.0.labels();
        if len != labels.len() {
            return Err(Failure(
                StainsegStatus::InvalidArgument,
                format!("buffer holds {len} labels, map has {}", labels.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(labels.as_ptr(), buf, len);
        Ok(())
    })
}

/// Instance segmentation from a probability and a distance map, each
/// `width * height` values. `params` may be null for defaults.
///
/// # Safety
/// `prob` and `dist` must point to `width * height` readable values and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stainseg_instances_from_maps(
    width: usize,
    height: usize,
    prob: *const f32,
    dist: *const f32,
    params: *const StainsegPostprocessParams,
    out: *mut *mut StainsegLabelMap,
) -> StainsegStatus {
    guard(|| {
        let n = width.checked_mul(height).ok_or_else(|| fail(StainsegStatus::InvalidArgument, "size overflow"))?;
        let map = |data: *const f32, what: &str| -> Result<FloatMap, Failure> {
            FloatMap::new(width, height, 1, slice(data, n, what)?.to_vec())
                .map_err(|e| fail(StainsegStatus::InvalidArgument, format!("{what}: {e}")))
        };
        let (prob, dist) = (map(prob, "prob")?, map(dist, "dist")?);
        let params = match params.as_ref() {
            None => PostprocessParams::default(),
            Some(p) => PostprocessParams {
                prob_threshold: p.prob_threshold,
                gaussian_sigma: p.gaussian_sigma,
                marker_h: if p.marker_h_relative != 0 {
                    MarkerDepth::Relative(p.marker_h)
                } else {
                    MarkerDepth::Absolute(p.marker_h)
                },
                min_instance_area: p.min_instance_area,
                opening_radius: p.opening_radius,
            },
        };
        let labels = postprocess::instances_from_maps(&prob, &dist, &params)
            .map_err(|e| fail(StainsegStatus::PostprocessFailure, e))?;
        store(out, StainsegLabelMap(labels))
    })
}

/// Dice, AJI and PQ of `pred` against `gt`.
///
/// # Safety
/// Handles must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stainseg_evaluate(
    gt: *const StainsegLabelMap,
    pred: *const StainsegLabelMap,
    out: *mut StainsegMetrics,
) -> StainsegStatus {
    guard(|| {
        let (gt, pred) = (handle(gt, "gt")?, handle(pred, "pred")?);
        let out = out.as_mut().ok_or_else(|| null("output pointer"))?;
        let m = metrics::evaluate_pair("", &gt.0, &pred.0).map_err(|e| fail(StainsegStatus::DimensionMismatch, e))?;
        *out = StainsegMetrics {
            dice: m.dice,
            aji: m.aji,
            pq: m.panoptic.pq,
            dq: m.panoptic.dq,
            sq: m.panoptic.sq,
            tp: m.panoptic.tp,
            fp: m.panoptic.fp,
            fn_: m.panoptic.fn_,
        };
        Ok(())
    })
}
