//! C interface to the fundus synthesis library.
//!
//! Models are opaque handles created by `fs_model_load` and released by
//! `fs_model_free`. Every fallible call returns an `FsStatus`; on failure the
//! message is available from `fs_last_error` on the same thread until the next
//! failing call. Images cross the boundary as contiguous `f32` buffers in
//! `N×3×S×S` order with values in `[-1, 1]`. Panics never unwind into C; they
//! surface as `FS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fundus_synth::imaging::{synthesize_toy_fundus, ImageTensor};
use fundus_synth::metrics::{ssim, SsimParams};
use fundus_synth::model::{sample_novel, LatentPrior, Model};
use fundus_synth::training::Checkpoint;
use fundus_synth::{Error, Tensor};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Numeric = 6,
    Config = 7,
    Panic = 8,
}

/// A trained model together with its sampling prior.
pub struct FsModel {
    model: Model,
    prior: Option<LatentPrior>,
    delta: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FsStatus {
    match e {
        Error::Io { .. } | Error::Decode { .. } => FsStatus::Io,
        Error::Checkpoint(_) => FsStatus::Checkpoint,
        Error::Shape(_) | Error::Channel(_) | Error::Resolution(_) => FsStatus::Shape,
        Error::Numeric(_) => FsStatus::Numeric,
        Error::Config(_) | Error::Json(_) | Error::Parse { .. } => FsStatus::Config,
        Error::Argument(_) | Error::Usage(_) | Error::EmptyManifest(_) => FsStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Run `f`, translating errors and panics into a status and the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            FsStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            FsStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            FsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(())
    }
}

fn image_len(size: usize) -> usize {
    3 * size * size
}

/// Copy `images` into `out`, which must hold exactly their total length.
fn write_images(images: &[ImageTensor], out: *mut f32, out_len: usize) -> Result<(), Fail> {
    let need: usize = images.iter().map(|i| i.tensor().numel()).sum();
    if out_len != need {
        return Err(Fail::Arg(format!("output buffer holds {out_len} floats, {need} required")));
    }
    // SAFETY: caller guarantees `out` points to `out_len` writable floats.
    let dst = unsafe { std::slice::from_raw_parts_mut(out, out_len) };
    let mut at = 0;
    for img in images {
        let d = img.tensor().data();
        dst[at..at + d.len()].copy_from_slice(d);
        at += d.len();
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn fs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map(|c| c.as_ptr()).unwrap_or(ptr::null()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint file. On success `*out` receives a handle owned by the caller.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fs_model_load(path: *const c_char, out: *mut *mut FsModel) -> FsStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        // SAFETY: checked non-null; caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Fail::Arg("path is not valid UTF-8".into()))?;
        let ck = Checkpoint::load(&PathBuf::from(path))?;
        let handle = Box::new(FsModel {
            model: ck.model()?,
            prior: ck.prior.clone(),
            delta: ck.config.delta,
        });
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(handle) };
        Ok(())
    })
}

/// Release a handle from `fs_model_load`. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fs_model_free(model: *mut FsModel) {
    if !model.is_null() {
        // SAFETY: handle came from Box::into_raw in fs_model_load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Image edge length the model works at, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_model_image_size(model: *const FsModel) -> usize {
    // SAFETY: caller guarantees a live handle or null.
    unsafe { model.as_ref() }.map(|m| m.model.cfg.image_size).unwrap_or(0)
}

/// Whether the model carries a fitted prior (needed by `fs_model_sample`).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_model_has_prior(model: *const FsModel) -> bool {
    // SAFETY: caller guarantees a live handle or null.
    unsafe { model.as_ref() }.map(|m| m.prior.is_some()).unwrap_or(false)
}

/// Encode and resynthesize `count` images. Both buffers hold `count·3·S·S` floats.
///
/// # Safety
/// `model` must be a live handle; `input` and `output` must point to buffers of
/// the stated lengths and may not overlap.
#[no_mangle]
pub unsafe extern "C" fn fs_model_reconstruct(
    model: *const FsModel,
    input: *const f32,
    count: usize,
    output: *mut f32,
    output_len: usize,
) -> FsStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(input, "input")?;
        non_null(output, "output")?;
        if count == 0 {
            return Err(Fail::Arg("count must be positive".into()));
        }
        // SAFETY: checked non-null; caller guarantees liveness.
        let m = unsafe { &*model };
        let s = m.model.cfg.image_size;
        let n = count * image_len(s);
        // SAFETY: caller guarantees `input` holds `count·3·S·S` floats.
        let data = unsafe { std::slice::from_raw_parts(input, n) }.to_vec();
        let x = Tensor::new(&[count, 3, s, s], data)?;
        let y = m.model.reconstruct(&x, m.delta)?;
        let imgs = fundus_synth::imaging::unbatch(&y)?;
        write_images(&imgs, output, output_len)
    })
}

/// Sample `count` novel images with truncation `psi` in [0, 1]. `output`
/// holds `count·3·S·S` floats.
///
/// # Safety
/// `model` must be a live handle; `output` must point to `output_len` floats.
#[no_mangle]
pub unsafe extern "C" fn fs_model_sample(
    model: *const FsModel,
    count: usize,
    seed: u64,
    psi: f32,
    output: *mut f32,
    output_len: usize,
) -> FsStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(output, "output")?;
        // SAFETY: checked non-null; caller guarantees liveness.
        let m = unsafe { &*model };
        let prior = m
            .prior
            .as_ref()
            .ok_or_else(|| Fail::Lib(Error::Checkpoint("model has no fitted latent prior".into())))?;
        let imgs = sample_novel(&m.model, prior, count, seed, psi)?;
        write_images(&imgs, output, output_len)
    })
}

/// Render one procedural toy fundus image of edge `size` into `output`
/// (`3·size·size` floats). `has_lesions` may be null.
///
/// # Safety
/// `output` must point to `output_len` floats; `has_lesions` null or valid.
#[no_mangle]
pub unsafe extern "C" fn fs_toy_fundus(
    seed: u64,
    size: usize,
    output: *mut f32,
    output_len: usize,
    has_lesions: *mut bool,
) -> FsStatus {
    guard(|| {
        non_null(output, "output")?;
        let (img, params) = synthesize_toy_fundus(seed, size)?;
        write_images(std::slice::from_ref(&img), output, output_len)?;
        if !has_lesions.is_null() {
            // SAFETY: checked non-null.
            unsafe { *has_lesions = params.has_lesions() };
        }
        Ok(())
    })
}

/// SSIM of two `3×size×size` images with the default 11-tap Gaussian window.
///
/// # Safety
/// `a` and `b` must each point to `3·size·size` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fs_ssim(a: *const f32, b: *const f32, size: usize, out: *mut f64) -> FsStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        let n = image_len(size);
        // SAFETY: caller guarantees both buffers hold `n` floats.
        let (xa, xb) = unsafe { (std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n)) };
        let ta = Tensor::new(&[3, size, size], xa.to_vec())?;
        let tb = Tensor::new(&[3, size, size], xb.to_vec())?;
        let v = ssim(&ta, &tb, &SsimParams::default())?;
        // SAFETY: checked non-null.
        unsafe { *out = v };
        Ok(())
    })
}
