//! C ABI over the `gsu` library.
//!
//! Objects cross the boundary as opaque handles created by `gsu_*_new`/`read`
//! style functions and released with the matching `*_free`. Every function
//! returns a [`GsuStatus`]; on failure a message is available from
//! [`gsu_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gsu::degrade::{compose_and_apply, observation_mask, Fraction, MaskRecipe};
use gsu::denoiser::Denoiser;
use gsu::eval::{consistency, interpolate_baseline, psnr, ssim, Interpolation};
use gsu::geom::DepthVideo;
use gsu::infer::{upsample, UpsampleConfig};
use gsu::io::{Container, VideoRecord};
use gsu::tensor::Tensor;
use gsu::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GsuStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Format = 5,
    Io = 6,
    Panic = 7,
}

/// A depth video (`frames×1×height×width`, values in `[0, 1]`).
pub struct GsuVideo {
    record: VideoRecord,
}

/// A trained denoiser loaded from a checkpoint.
pub struct GsuModel {
    model: Denoiser<f32>,
}

/// Scores of a prediction against a reference.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GsuMetrics {
    /// Decibels; `INFINITY` when the videos are identical.
    pub psnr_db: f64,
    pub ssim: f64,
    pub consistency: f64,
}

/// Sampling options; see [`gsu_sample_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GsuSampleOptions {
    pub steps: u32,
    /// Frames per denoiser call.
    pub clip: u32,
    /// Non-zero samples each frame on its own.
    pub ablate_frames: u8,
    /// Non-zero adds posterior noise between steps.
    pub stochastic: u8,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GsuStatus {
    match e {
        Error::ShapeMismatch { .. } => GsuStatus::ShapeMismatch,
        Error::NonFinite { .. } | Error::GradcheckFailed(_) => GsuStatus::NonFinite,
        Error::InvalidArgument(_) => GsuStatus::InvalidArgument,
        Error::Format(_) => GsuStatus::Format,
        Error::Io(_) => GsuStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GsuStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GsuStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed as {what}"));
            GsuStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            GsuStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn string(p: *const c_char, what: &'static str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::Lib(Error::invalid(format!("{what} is not valid UTF-8"))))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn video_handle(video: DepthVideo, like: &VideoRecord) -> GsuVideo {
    GsuVideo { record: VideoRecord { video, mask: None, ..like.clone() } }
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn gsu_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copy `frames·height·width` depth values into a new video.
///
/// # Safety
/// `data` must point to that many floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gsu_video_new(
    frames: usize,
    height: usize,
    width: usize,
    data: *const f32,
    out: *mut *mut GsuVideo,
) -> GsuStatus {
    guard(|| {
        if data.is_null() {
            return Err(Failure::Null("data"));
        }
        let n = frames
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid("video dimensions must be positive"))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("depth values must lie in [0, 1]").into());
        }
        let video = DepthVideo::new(Tensor::new(&[frames, 1, height, width], values)?)?;
        put(out, GsuVideo { record: VideoRecord::new(video, "", "") })
    })
}

/// Read a GSU1 depth-video file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gsu_video_read(path: *const c_char, out: *mut *mut GsuVideo) -> GsuStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        put(out, GsuVideo { record: VideoRecord::read(&path)? })
    })
}

/// Write a video as a GSU1 file.
///
/// # Safety
/// `video` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gsu_video_write(video: *const GsuVideo, path: *const c_char) -> GsuStatus {
    guard(|| {
        let v = get(video, "video")?;
        let path = PathBuf::from(string(path, "path")?);
        Ok(v.record.write(&path)?)
    })
}

/// Dimensions of a video.
///
/// # Safety
/// `video` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn gsu_video_shape(
    video: *const GsuVideo,
    frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> GsuStatus {
    guard(|| {
        let v = &get(video, "video")?.record.video;
        if frames.is_null() || height.is_null() || width.is_null() {
            return Err(Failure::Null("shape output"));
        }
        *frames = v.frames();
        *height = v.height();
        *width = v.width();
        Ok(())
    })
}

/// Copy the depth values (row-major) into `out`, which holds `len` floats.
///
/// # Safety
/// `video` must be a live handle and `out` writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn gsu_video_copy_data(video: *const GsuVideo, out: *mut f32, len: usize) -> GsuStatus {
    guard(|| {
        let data = get(video, "video")?.record.video.depth.data();
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if len != data.len() {
            return Err(Error::invalid(format!("buffer holds {len} values, video has {}", data.len())).into());
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, len);
        Ok(())
    })
}

/// Release a video; null is ignored.
///
/// # Safety
/// `video` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gsu_video_free(video: *mut GsuVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}

/// Apply a vertical-line (keep every `keep_every`-th row) and pepper
/// (`drop_num/drop_den`) mask. The pepper stream is keyed by `seed` and
/// `sequence_id`.
///
/// # Safety
/// `video` must be a live handle, `sequence_id` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gsu_degrade(
    video: *const GsuVideo,
    keep_every: u32,
    drop_num: u32,
    drop_den: u32,
    seed: u64,
    sequence_id: *const c_char,
    out: *mut *mut GsuVideo,
) -> GsuStatus {
    guard(|| {
        let v = get(video, "video")?;
        let id = string(sequence_id, "sequence_id")?;
        let recipe = MaskRecipe::new(keep_every as usize, Fraction::new(drop_num, drop_den)?, seed)?;
        let (y, mask) = compose_and_apply(&v.record.video, &recipe, &id)?;
        let record = VideoRecord { video: y, mask: Some(mask), recipe: Some(recipe.label()), ..v.record.clone() };
        put(out, GsuVideo { record })
    })
}

/// Fill empty pixels with an interpolation baseline: 0 nearest, 1 bilinear,
/// 2 bicubic.
///
/// # Safety
/// `video` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gsu_baseline(video: *const GsuVideo, method: u32, out: *mut *mut GsuVideo) -> GsuStatus {
    guard(|| {
        let v = get(video, "video")?;
        let method = match method {
            0 => Interpolation::Nearest,
            1 => Interpolation::Bilinear,
            2 => Interpolation::Bicubic,
            _ => return Err(Error::invalid(format!("unknown interpolation method {method}")).into()),
        };
        let y = &v.record.video;
        put(out, video_handle(interpolate_baseline(y, &observation_mask(y), method)?, &v.record))
    })
}

/// Load a checkpoint's EMA weights.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gsu_model_load(path: *const c_char, out: *mut *mut GsuModel) -> GsuStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        let model = gsu::train::load_model::<f32>(&Container::read(&path)?, false)?;
        put(out, GsuModel { model })
    })
}

/// Release a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gsu_model_free(model: *mut GsuModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Defaults: 32 steps, 10-frame clips, video mode, stochastic, seed 0.
#[no_mangle]
pub extern "C" fn gsu_sample_options_default() -> GsuSampleOptions {
    let d = UpsampleConfig::default();
    GsuSampleOptions {
        steps: d.steps as u32,
        clip: d.clip as u32,
        ablate_frames: d.ablate_frames as u8,
        stochastic: d.stochastic as u8,
        seed: d.seed,
    }
}

/// Inpaint the empty pixels of a degraded video.
///
/// # Safety
/// `model` and `video` must be live handles, `options` readable and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gsu_sample(
    model: *const GsuModel,
    video: *const GsuVideo,
    options: *const GsuSampleOptions,
    out: *mut *mut GsuVideo,
) -> GsuStatus {
    guard(|| {
        let m = get(model, "model")?;
        let v = get(video, "video")?;
        let o = get(options, "options")?;
        let cfg = UpsampleConfig {
            steps: o.steps as usize,
            clip: o.clip as usize,
            ablate_frames: o.ablate_frames != 0,
            stochastic: o.stochastic != 0,
            seed: o.seed,
        };
        put(out, video_handle(upsample(&m.model, &v.record.video, &cfg)?, &v.record))
    })
}

/// PSNR (peak 1), SSIM and temporal consistency of `pred` against `reference`.
///
/// # Safety
/// Both videos must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gsu_metrics(
    pred: *const GsuVideo,
    reference: *const GsuVideo,
    out: *mut GsuMetrics,
) -> GsuStatus {
    guard(|| {
        let (p, r) = (&get(pred, "pred")?.record.video, &get(reference, "reference")?.record.video);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = GsuMetrics { psnr_db: psnr(p, r, 1.0)?, ssim: ssim(p, r)?, consistency: consistency(p, r)? };
        Ok(())
    })
}
