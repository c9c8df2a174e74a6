//! Image tensors, PNG/JPEG I/O, dataset manifests and the procedural toy corpus.

pub(crate) mod manifest;
mod toy;

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{build_manifest, DatasetManifest, Layout, ManifestEntry, Split};
pub use toy::{synthesize_toy_fundus, LesionKind, LesionSpot, ToyParams, VesselCurve};

/// Smallest and largest supported square image edge.
pub const MIN_SIZE: usize = 32;
pub const MAX_SIZE: usize = 1024;

/// A `3×S×S` RGB image with values in `[-1, 1]`, `S` a power of two in `[32, 1024]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Channel(format!("expected 3×H×W, got {s:?}")));
        }
        if s[1] != s[2] {
            return Err(Error::Shape(format!("image must be square, got {}×{}", s[1], s[2])));
        }
        check_size(s[1])?;
        if let Some(v) = t.data().iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Numeric(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(ImageTensor(t))
    }

    /// Build from values that may exceed `[-1, 1]` by clamping them.
    pub fn from_clamped(t: Tensor) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite pixel values".into()));
        }
        Self::new(t.map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn size(&self) -> usize {
        self.0.dim(1)
    }

    /// Bilinear resize to `size×size`; a clone when already that size.
    pub fn resized(&self, size: usize) -> Result<ImageTensor> {
        let s = self.size();
        if s == size {
            return Ok(self.clone());
        }
        let d = self.0.data();
        let mut data = Vec::with_capacity(3 * size * size);
        for c in 0..3 {
            data.extend(resize_bilinear(&d[c * s * s..(c + 1) * s * s], s, s, size, size));
        }
        ImageTensor::from_clamped(Tensor::new(&[3, size, size], data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

pub(crate) fn check_size(size: usize) -> Result<()> {
    if !(MIN_SIZE..=MAX_SIZE).contains(&size) || !size.is_power_of_two() {
        return Err(Error::Resolution(format!(
            "image size {size} is not a power of two in [{MIN_SIZE}, {MAX_SIZE}]"
        )));
    }
    Ok(())
}

/// Stack images into an `N×3×S×S` batch.
pub fn batch(images: &[&ImageTensor]) -> Result<Tensor> {
    let ts: Vec<Tensor> = images.iter().map(|i| i.0.clone()).collect();
    Tensor::stack(&ts)
}

/// Split an `N×3×S×S` batch back into images, clamping into range.
pub fn unbatch(t: &Tensor) -> Result<Vec<ImageTensor>> {
    (0..t.dim(0)).map(|i| ImageTensor::from_clamped(t.index0(i))).collect()
}

/// Decode a PNG or JPEG, bilinearly resize to `size×size` and map 8-bit values to `[-1, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor> {
    check_size(size)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = match img {
        DynamicImage::ImageRgb8(b) => b,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            img.to_rgb8()
        }
        other => {
            return Err(Error::Channel(format!(
                "{} has color type {:?}; RGB expected",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let planes: Vec<Vec<f32>> = (0..3)
        .map(|c| rgb.pixels().map(|p| p.0[c] as f32).collect())
        .collect();
    let mut data = Vec::with_capacity(3 * size * size);
    for plane in &planes {
        let resized = resize_bilinear(plane, h, w, size, size);
        data.extend(resized.into_iter().map(|v| v / 127.5 - 1.0));
    }
    ImageTensor::from_clamped(Tensor::new(&[3, size, size], data)?)
}

/// Bilinear resampling with half-pixel centres (`align_corners = false`).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if h == oh && w == ow {
        return src.to_vec();
    }
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    let coord = |o: usize, scale: f32, n: usize| {
        let c = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f32)
    };
    let xs: Vec<_> = (0..ow).map(|x| coord(x, sx, w)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, sy, h);
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// 8-bit value of a `[-1, 1]` sample, clamped, rounding half up.
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5 + 0.5).floor().min(255.0) as u8
}

/// Encode as an 8-bit RGB PNG.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let s = img.size();
    let d = img.0.data();
    let buf = ImageBuffer::from_fn(s as u32, s as u32, |x, y| {
        let i = y as usize * s + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[s * s + i]), to_u8(d[2 * s * s + i])])
    });
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}

/// Tile images into a `rows×cols` grid image (not constrained to power-of-two sizes).
pub fn save_grid(images: &[ImageTensor], cols: usize, path: &Path) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("empty image grid".into()))?;
    let s = first.size();
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = ((cols * s) as u32, (rows * s) as u32);
    let mut buf = ImageBuffer::from_pixel(gw, gh, Rgb([0u8, 0, 0]));
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = ((k % cols) * s, (k / cols) * s);
        let d = img.0.data();
        for y in 0..s {
            for x in 0..s {
                let i = y * s + x;
                buf.put_pixel(
                    (ox + x) as u32,
                    (oy + y) as u32,
                    Rgb([to_u8(d[i]), to_u8(d[s * s + i]), to_u8(d[2 * s * s + i])]),
                );
            }
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
