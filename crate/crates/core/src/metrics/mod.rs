//! Paired and distributional image metrics: SSIM, FID and KID over deep
//! features, plus directory-level evaluation.

mod fid;
mod kid;
mod ssim;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use fid::{fid, frechet, mean_cov, sqrt_psd, FID_EPS};
pub use kid::{kid, KidParams};
pub use ssim::{gaussian_taps, ssim, SsimParams};

use crate::autograd::{Activation, Tape};
use crate::error::{Error, Result};
use crate::imaging::manifest::{is_image, sorted_dir};
use crate::imaging::{batch, load_image, ImageTensor};
use crate::losses::PerceptualExtractor;
use crate::util::digest_json;

/// `N×D` feature rows in `f64`, tagged with the extractor that made them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub data: Vec<f64>,
    pub dim: usize,
    pub extractor_id: String,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, dim: usize, extractor_id: &str) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values do not form rows of width {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(FeatureMatrix {
            data,
            dim,
            extractor_id: extractor_id.to_string(),
        })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// First `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> (FeatureMatrix, FeatureMatrix) {
        let (a, b) = self.data.split_at(n * self.dim);
        let mk = |d: &[f64]| FeatureMatrix {
            data: d.to_vec(),
            dim: self.dim,
            extractor_id: self.extractor_id.clone(),
        };
        (mk(a), mk(b))
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            data: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            dim: self.dim,
            extractor_id: self.extractor_id.clone(),
        }
    }

    /// Per-dimension population variance.
    pub fn variances(&self) -> Vec<f64> {
        let n = self.rows() as f64;
        (0..self.dim)
            .map(|j| {
                let m = (0..self.rows()).map(|i| self.row(i)[j]).sum::<f64>() / n;
                (0..self.rows()).map(|i| (self.row(i)[j] - m).powi(2)).sum::<f64>() / n
            })
            .collect()
    }
}

/// Conv stack plus global average pooling of its last stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub net: PerceptualExtractor,
    /// Images are resized to this size before extraction.
    pub input_size: usize,
}

impl FeatureExtractor {
    /// Fixed-seed 64-dimensional profile needing no downloaded weights.
    pub fn test_profile() -> Self {
        FeatureExtractor {
            net: PerceptualExtractor::random(1, &[16, 32, 64], Activation::LeakyRelu),
            input_size: 64,
        }
    }

    /// Load a conv stack from JSON (see [`PerceptualExtractor::load`]).
    pub fn load(path: &Path, input_size: usize) -> Result<Self> {
        Ok(FeatureExtractor {
            net: PerceptualExtractor::load(path)?,
            input_size,
        })
    }

    pub fn id(&self) -> String {
        format!("{}@{}", self.net.id, self.input_size)
    }

    pub fn dim(&self) -> usize {
        self.net.stages.last().map(|s| s.weight.dim(0)).unwrap_or(0)
    }

    fn prepare(&self, img: &ImageTensor) -> Result<ImageTensor> {
        img.resized(self.input_size)
    }
}

/// One feature row per image, in input order.
pub fn extract_features(images: &[ImageTensor], fx: &FeatureExtractor) -> Result<FeatureMatrix> {
    let mut data = Vec::with_capacity(images.len() * fx.dim());
    for group in images.chunks(16) {
        let prepared = group.iter().map(|i| fx.prepare(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageTensor> = prepared.iter().collect();
        let mut tape = Tape::detached();
        let x = tape.constant(batch(&refs)?);
        let feats = fx.net.features(&mut tape, x)?;
        let last = *feats.last().ok_or_else(|| Error::Config("feature extractor has no stages".into()))?;
        let pooled = tape.global_avg_pool(last)?;
        data.extend(tape.value(pooled).data().iter().map(|v| *v as f64));
    }
    FeatureMatrix::new(data, fx.dim(), &fx.id())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim_mean: Option<f64>,
    pub ssim_std: Option<f64>,
    pub fid: f64,
    pub kid_mean: f64,
    pub kid_std: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub extractor_id: String,
    pub config_digest: String,
}

/// How generated images map to real ones for SSIM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// SSIM is skipped.
    None,
    /// Files with the same name in both directories.
    Identity,
    /// JSON Lines of `{"gen": …, "real": …}`, relative to the file's directory.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub image_size: usize,
    pub pairing: Pairing,
    pub kid: KidParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            image_size: 64,
            pairing: Pairing::None,
            kid: KidParams::default(),
        }
    }
}

#[derive(Deserialize)]
struct PairLine {
    gen: PathBuf,
    real: PathBuf,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let files: Vec<PathBuf> = sorted_dir(dir)?.into_iter().filter(|p| is_image(p)).collect();
    if files.is_empty() {
        return Err(Error::Usage(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

fn pairs(cfg: &EvalConfig, real: &[PathBuf], gen: &[PathBuf]) -> Result<Option<Vec<(usize, usize)>>> {
    let index = |files: &[PathBuf]| -> BTreeMap<PathBuf, usize> {
        files.iter().enumerate().map(|(i, p)| (p.file_name().map(PathBuf::from).unwrap_or_default(), i)).collect()
    };
    let (ri, gi) = (index(real), index(gen));
    match &cfg.pairing {
        Pairing::None => Ok(None),
        Pairing::Identity => {
            let p: Vec<(usize, usize)> = gi.iter().filter_map(|(name, &g)| ri.get(name).map(|&r| (g, r))).collect();
            Ok(if p.is_empty() { None } else { Some(p) })
        }
        Pairing::File(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut out = Vec::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let pl: PairLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                    line: n + 1,
                    msg: e.to_string(),
                })?;
                let key = |p: &Path| p.file_name().map(PathBuf::from).unwrap_or_default();
                match (gi.get(&key(&pl.gen)), ri.get(&key(&pl.real))) {
                    (Some(&g), Some(&r)) => out.push((g, r)),
                    _ => log::warn!("pairing line {} names a missing image; skipped", n + 1),
                }
            }
            Ok(if out.is_empty() { None } else { Some(out) })
        }
    }
}

/// FID and KID over both directories, SSIM over paired images when a pairing
/// is configured.
pub fn evaluate_dirs(real_dir: &Path, gen_dir: &Path, cfg: &EvalConfig, fx: &FeatureExtractor) -> Result<MetricReport> {
    let real_files = list_images(real_dir)?;
    let gen_files = list_images(gen_dir)?;
    let load = |files: &[PathBuf]| files.iter().map(|p| load_image(p, cfg.image_size)).collect::<Result<Vec<_>>>();
    let real = load(&real_files)?;
    let gen = load(&gen_files)?;
    evaluate_images(&real, &gen, pairs(cfg, &real_files, &gen_files)?.as_deref(), cfg, fx)
}

/// Metrics for in-memory image sets; `pairs` holds `(gen, real)` indices.
pub fn evaluate_images(
    real: &[ImageTensor],
    gen: &[ImageTensor],
    pairs: Option<&[(usize, usize)]>,
    cfg: &EvalConfig,
    fx: &FeatureExtractor,
) -> Result<MetricReport> {
    let (ssim_mean, ssim_std) = match pairs {
        Some(p) => {
            let vals = p
                .iter()
                .map(|&(g, r)| ssim(gen[g].tensor(), real[r].tensor(), &SsimParams::default()))
                .collect::<Result<Vec<f64>>>()?;
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            (Some(m), Some(sd))
        }
        None => {
            log::warn!("no pairing between generated and real images; SSIM omitted");
            (None, None)
        }
    };
    let fa = extract_features(real, fx)?;
    let fb = extract_features(gen, fx)?;
    let f = fid(&fa, &fb)?;
    let mut kp = cfg.kid;
    let cap = real.len().min(gen.len());
    if kp.subset_size > cap {
        log::warn!("KID subset size {} reduced to {cap} to fit the image sets", kp.subset_size);
        kp.subset_size = cap;
    }
    let (kid_mean, kid_std) = kid(&fa, &fb, &kp)?;
    Ok(MetricReport {
        ssim_mean,
        ssim_std,
        fid: f,
        kid_mean,
        kid_std,
        n_real: real.len(),
        n_gen: gen.len(),
        extractor_id: fx.id(),
        config_digest: digest_json(cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{save_image, synthesize_toy_fundus};

    fn corpus(n: usize, size: usize) -> Vec<ImageTensor> {
        (0..n).map(|s| synthesize_toy_fundus(s as u64, size).unwrap().0).collect()
    }

    fn blur(img: &ImageTensor) -> ImageTensor {
        let s = img.size();
        let t = img.tensor();
        let mut out = t.clone();
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for dy in -2i32..=2 {
                        for dx in -2i32..=2 {
                            let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                            if yy >= 0 && xx >= 0 && (yy as usize) < s && (xx as usize) < s {
                                acc += t.data()[(c * s + yy as usize) * s + xx as usize];
                                n += 1.0;
                            }
                        }
                    }
                    out.data_mut()[(c * s + y) * s + x] = acc / n;
                }
            }
        }
        ImageTensor::new(out).unwrap()
    }

    #[test]
    fn features_are_deterministic_and_vary() {
        let fx = FeatureExtractor::test_profile();
        let imgs = corpus(40, 64);
        let f = extract_features(&imgs, &fx).unwrap();
        assert_eq!((f.rows(), f.dim), (40, 64));
        let again = extract_features(&[imgs[3].clone(), imgs[3].clone()], &fx).unwrap();
        assert_eq!(again.row(0), again.row(1));
        assert_eq!(again.row(0), f.row(3));
        assert!(f.variances().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn directory_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let (real, gen) = (dir.path().join("real"), dir.path().join("gen"));
        let imgs = corpus(12, 64);
        for (i, img) in imgs.iter().enumerate() {
            save_image(img, &real.join(format!("{i:03}.png"))).unwrap();
            save_image(&blur(img), &gen.join(format!("{i:03}.png"))).unwrap();
        }
        let fx = FeatureExtractor::test_profile();
        let cfg = EvalConfig {
            pairing: Pairing::Identity,
            kid: KidParams { subset_size: 10, num_subsets: 5, seed: 0 },
            ..EvalConfig::default()
        };
        let same = evaluate_dirs(&real, &real, &cfg, &fx).unwrap();
        assert!((same.ssim_mean.unwrap() - 1.0).abs() < 1e-6);
        assert!(same.fid.abs() < 1e-6);
        assert!(same.kid_mean.abs() <= 0.01);
        let blurred = evaluate_dirs(&real, &gen, &cfg, &fx).unwrap();
        assert!(blurred.ssim_mean.unwrap() < 1.0);
        assert!(blurred.fid > 0.0);
        let json = serde_json::to_string(&blurred).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), blurred);
        let unpaired = evaluate_dirs(&real, &gen, &EvalConfig { pairing: Pairing::None, ..cfg.clone() }, &fx).unwrap();
        assert!(unpaired.ssim_mean.is_none());
        let empty = dir.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        assert!(matches!(evaluate_dirs(&real, &empty, &cfg, &fx), Err(Error::Usage(_))));
    }

    #[test]
    fn pairing_file() {
        let dir = tempfile::tempdir().unwrap();
        let (real, gen) = (dir.path().join("r"), dir.path().join("g"));
        let imgs = corpus(4, 32);
        for (i, img) in imgs.iter().enumerate() {
            save_image(img, &real.join(format!("src{i}.png"))).unwrap();
            save_image(img, &gen.join(format!("out{i}.png"))).unwrap();
        }
        let pf = dir.path().join("pairs.jsonl");
        let lines: String = (0..4).map(|i| format!("{{\"gen\":\"g/out{i}.png\",\"real\":\"r/src{i}.png\"}}\n")).collect();
        std::fs::write(&pf, lines).unwrap();
        let cfg = EvalConfig {
            image_size: 32,
            pairing: Pairing::File(pf),
            kid: KidParams { subset_size: 4, num_subsets: 2, seed: 0 },
        };
        let r = evaluate_dirs(&real, &gen, &cfg, &FeatureExtractor::test_profile()).unwrap();
        assert!((r.ssim_mean.unwrap() - 1.0).abs() < 1e-6);
    }
}
