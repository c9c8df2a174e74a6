//! Encoder and generator sharing one parameter store, detached latent codes,
//! and the Gaussian latent prior used to sample novel images.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::ModelConfig;
use crate::encoder::{Encoder, LatentVars};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::imaging::{unbatch, ImageTensor};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::util::rng_for;

/// Detached latent code for a batch: `w_plus` is `N×n×d`, `f` is `N×C0×R0×R0`,
/// each skip is `(resolution, N×C×r×r)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub w_plus: Tensor,
    pub f: Tensor,
    pub skips: Vec<(usize, Tensor)>,
}

impl LatentCode {
    pub fn batch_size(&self) -> usize {
        self.w_plus.dim(0)
    }

    pub fn delta(&self) -> usize {
        self.skips.len()
    }

    /// Push the code onto a tape, as differentiable leaves or as constants.
    pub fn to_vars(&self, tape: &mut Tape, differentiable: bool) -> LatentVars {
        let mut put = |t: &Tensor| {
            if differentiable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LatentVars {
            w_plus: put(&self.w_plus),
            f: put(&self.f),
            skips: self.skips.iter().map(|(r, t)| (*r, put(t))).collect(),
        }
    }

    pub fn from_vars(tape: &Tape, v: &LatentVars) -> Self {
        LatentCode {
            w_plus: tape.value(v.w_plus).clone(),
            f: tape.value(v.f).clone(),
            skips: v.skips.iter().map(|(r, s)| (*r, tape.value(*s).clone())).collect(),
        }
    }

    /// Sample `i` as a batch of one.
    pub fn item(&self, i: usize) -> LatentCode {
        let one = |t: &Tensor| {
            let mut shape = t.shape().to_vec();
            shape[0] = 1;
            t.index0(i).reshape(&shape).expect("same element count")
        };
        LatentCode {
            w_plus: one(&self.w_plus),
            f: one(&self.f),
            skips: self.skips.iter().map(|(r, t)| (*r, one(t))).collect(),
        }
    }

    /// Concatenate batches along the sample axis.
    pub fn concat(codes: &[LatentCode]) -> Result<LatentCode> {
        let first = codes.first().ok_or_else(|| Error::Argument("no latent codes to concatenate".into()))?;
        let cat = |get: &dyn Fn(&LatentCode) -> &Tensor| -> Result<Tensor> {
            let parts: Vec<&Tensor> = codes.iter().map(get).collect();
            let mut shape = parts[0].shape().to_vec();
            shape[0] = parts.iter().map(|t| t.dim(0)).sum();
            let mut data = Vec::with_capacity(shape.iter().product());
            for p in &parts {
                if p.shape()[1..] != shape[1..] {
                    return Err(Error::Shape("latent codes disagree in shape".into()));
                }
                data.extend_from_slice(p.data());
            }
            Tensor::new(&shape, data)
        };
        let w_plus = cat(&|c| &c.w_plus)?;
        let f = cat(&|c| &c.f)?;
        let mut skips = Vec::new();
        for k in 0..first.delta() {
            if codes.iter().any(|c| c.delta() != first.delta()) {
                return Err(Error::Shape("latent codes disagree in skip count".into()));
            }
            skips.push((first.skips[k].0, cat(&|c| &c.skips[k].1)?));
        }
        Ok(LatentCode { w_plus, f, skips })
    }
}

/// Encoder plus generator with all weights in one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub generator: Generator,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "model.init");
        let encoder = Encoder::new(cfg, &mut store, &mut rng)?;
        let generator = Generator::new(cfg, &mut store, &mut rng)?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            encoder,
            generator,
        })
    }

    /// Encode an `N×3×S×S` batch without recording parameter gradients.
    pub fn encode(&self, x: &Tensor, delta: usize) -> Result<LatentCode> {
        let mut tape = Tape::frozen(&self.store);
        let xv = tape.constant(x.clone());
        let v = self.encoder.encode(&mut tape, xv, delta)?;
        Ok(LatentCode::from_vars(&tape, &v))
    }

    /// Render a batch from a detached code.
    pub fn synthesize(&self, code: &LatentCode) -> Result<Tensor> {
        let mut tape = Tape::frozen(&self.store);
        let v = code.to_vars(&mut tape, false);
        let s = self.generator.synthesize(&mut tape, &v)?;
        Ok(tape.value(s.image).clone())
    }

    pub fn reconstruct(&self, x: &Tensor, delta: usize) -> Result<Tensor> {
        self.synthesize(&self.encode(x, delta)?)
    }

    /// Encode a list of images in chunks of `chunk`.
    pub fn encode_images(&self, images: &[ImageTensor], delta: usize, chunk: usize) -> Result<LatentCode> {
        let mut parts = Vec::new();
        for group in images.chunks(chunk.max(1)) {
            let refs: Vec<&ImageTensor> = group.iter().collect();
            parts.push(self.encode(&crate::imaging::batch(&refs)?, delta)?);
        }
        LatentCode::concat(&parts)
    }
}

/// Per-element Gaussian fit to encoder outputs over a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPrior {
    /// `n×d` mean and variance of the style rows.
    pub w_mean: Tensor,
    pub w_var: Tensor,
    /// Mean and standard deviation of the base feature, `C0×R0×R0`.
    pub f_mean: Tensor,
    pub f_std: Tensor,
    /// Mean and standard deviation of each skip map.
    pub skips: Vec<SkipStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipStats {
    pub resolution: usize,
    pub mean: Tensor,
    pub std: Tensor,
}

/// Per-element mean and population variance over the leading axis.
fn moments(t: &Tensor) -> (Tensor, Tensor) {
    let n = t.dim(0);
    let inner = t.numel() / n.max(1);
    let mut mean = vec![0f64; inner];
    let mut sq = vec![0f64; inner];
    for row in t.data().chunks(inner) {
        for ((m, s), &v) in mean.iter_mut().zip(&mut sq).zip(row) {
            *m += v as f64;
            *s += (v as f64) * (v as f64);
        }
    }
    let shape = &t.shape()[1..];
    let mu: Vec<f32> = mean.iter().map(|m| (m / n as f64) as f32).collect();
    let var: Vec<f32> = mean
        .iter()
        .zip(&sq)
        .map(|(m, s)| {
            let m = m / n as f64;
            (s / n as f64 - m * m).max(0.0) as f32
        })
        .collect();
    (Tensor::new(shape, mu).unwrap(), Tensor::new(shape, var).unwrap())
}

impl LatentPrior {
    pub fn fit(code: &LatentCode) -> Result<Self> {
        if code.batch_size() == 0 {
            return Err(Error::Argument("cannot fit a latent prior to zero samples".into()));
        }
        let (w_mean, w_var) = moments(&code.w_plus);
        let (f_mean, f_var) = moments(&code.f);
        let skips = code
            .skips
            .iter()
            .map(|(r, t)| {
                let (mean, var) = moments(t);
                SkipStats {
                    resolution: *r,
                    mean,
                    std: var.map(f32::sqrt),
                }
            })
            .collect();
        Ok(LatentPrior {
            w_mean,
            w_var,
            f_mean,
            f_std: f_var.map(f32::sqrt),
            skips,
        })
    }

    /// Draw `count` codes: `w = μ + ψ·σ·z`, and `f`, skips = `mean + ψ·noise·std·z`.
    pub fn sample(&self, count: usize, seed: u64, psi: f32, noise: f32) -> Result<LatentCode> {
        if !(0.0..=1.0).contains(&psi) {
            return Err(Error::Argument(format!("truncation must be in [0, 1], got {psi}")));
        }
        let mut rng = rng_for(seed, "prior.sample");
        let mut draw = |mean: &Tensor, spread: &dyn Fn(usize) -> f32| -> Tensor {
            let mut shape = vec![count];
            shape.extend_from_slice(mean.shape());
            let mut data = Vec::with_capacity(count * mean.numel());
            for _ in 0..count {
                for (i, &m) in mean.data().iter().enumerate() {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    data.push(m + spread(i) * z);
                }
            }
            Tensor::new(&shape, data).unwrap()
        };
        let w_plus = draw(&self.w_mean, &|i| psi * self.w_var.data()[i].sqrt());
        let f = draw(&self.f_mean, &|i| psi * noise * self.f_std.data()[i]);
        let skips = self
            .skips
            .iter()
            .map(|s| (s.resolution, draw(&s.mean, &|i| psi * noise * s.std.data()[i])))
            .collect();
        Ok(LatentCode { w_plus, f, skips })
    }
}

/// Default spread of the base feature and skips relative to their fitted deviation.
pub const DEFAULT_FEATURE_NOISE: f32 = 0.25;

/// Render `count` novel images from the prior, deterministic in `(seed, count, psi)`.
pub fn sample_novel(model: &Model, prior: &LatentPrior, count: usize, seed: u64, psi: f32) -> Result<Vec<ImageTensor>> {
    let code = prior.sample(count, seed, psi, DEFAULT_FEATURE_NOISE)?;
    let mut out = Vec::with_capacity(count);
    for start in (0..count).step_by(16) {
        let part: Vec<LatentCode> = (start..(start + 16).min(count)).map(|i| code.item(i)).collect();
        let imgs = model.synthesize(&LatentCode::concat(&part)?)?;
        out.extend(unbatch(&imgs)?);
    }
    Ok(out)
}
