//! Structural similarity with a Gaussian window, valid-mode, in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 2.0,
        }
    }
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid window positions of each channel, averaged over
/// channels. Inputs are `C×H×W` (or `1×C×H×W`).
pub fn ssim(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Argument(format!("ssim inputs differ: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < p.window || w < p.window {
        return Err(Error::Argument(format!("image {h}×{w} is smaller than the {} window", p.window)));
    }
    let channels = x.numel() / (h * w);
    let taps = gaussian_taps(p.window, p.sigma);
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let mut total = 0.0;
    for c in 0..channels {
        let a: Vec<f64> = x.data()[c * h * w..(c + 1) * h * w].iter().map(|v| *v as f64).collect();
        let b: Vec<f64> = y.data()[c * h * w..(c + 1) * h * w].iter().map(|v| *v as f64).collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u * v).collect();
        let mu_a = filter(&a, h, w, &taps);
        let mu_b = filter(&b, h, w, &taps);
        let e_aa = filter(&aa, h, w, &taps);
        let e_bb = filter(&bb, h, w, &taps);
        let e_ab = filter(&ab, h, w, &taps);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / channels as f64)
}
