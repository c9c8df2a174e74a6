//! Reconstruction and regularisation losses, the running mean latent, the
//! perceptual feature extractor and the optional adversarial critic.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::util::rng_for;

/// Normalisation epsilon used throughout the losses.
pub const EPS: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub reg: f64,
    pub lpips: f64,
    pub l2: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            reg: 0.005,
            lpips: 0.8,
            l2: 1.0,
            adv: 0.0,
        }
    }
}

impl LossWeights {
    pub fn new(reg: f64, lpips: f64, l2: f64) -> Self {
        LossWeights { reg, lpips, l2, adv: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.reg, self.lpips, self.l2, self.adv];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        if self.lpips == 0.0 && self.l2 == 0.0 {
            return Err(Error::Config("at least one of the perceptual and pixel weights must be positive".into()));
        }
        Ok(())
    }
}

/// Loss values of one step. Component fields hold the unweighted values;
/// `total = Σ weight·component`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub reg: f64,
    pub lpips: f64,
    pub l2: f64,
    pub adv: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.total, self.reg, self.lpips, self.l2, self.adv].iter().all(|v| v.is_finite())
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Argument(format!(
            "loss inputs differ in shape: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn l2_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    same_shape(tape, x, x_hat)?;
    let d = tape.sub(x_hat, x)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Repeat an `n×d` tensor `batch` times along a new leading axis.
fn tile(t: &Tensor, batch: usize) -> Tensor {
    let mut shape = vec![batch];
    shape.extend_from_slice(t.shape());
    let data = t.data().repeat(batch);
    Tensor::new(&shape, data).unwrap()
}

/// Batch mean of `‖w − w̄‖ / √(n·d)`. `w_bar` enters as a constant.
pub fn reg_loss(tape: &mut Tape, w_plus: Var, w_bar: &Tensor) -> Result<Var> {
    let ws = tape.shape(w_plus).to_vec();
    if ws.len() != 3 || ws[1..] != *w_bar.shape() {
        return Err(Error::Argument(format!(
            "latent {ws:?} does not match mean latent {:?}",
            w_bar.shape()
        )));
    }
    let bar = tape.constant(tile(w_bar, ws[0]));
    let d = tape.sub(w_plus, bar)?;
    let norms = tape.row_norm(d);
    let m = tape.mean(norms);
    Ok(tape.scale(m, 1.0 / ((ws[1] * ws[2]) as f32).sqrt()))
}

/// Exponential moving average of encoder style rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanLatent {
    pub w_bar: Tensor,
    pub decay: f32,
    pub update_count: u64,
}

impl MeanLatent {
    pub fn new(n: usize, d: usize, decay: f32) -> Self {
        MeanLatent {
            w_bar: Tensor::zeros(&[n, d]),
            decay,
            update_count: 0,
        }
    }

    /// Fold in the mean of an `N×n×d` batch; the first call copies it.
    pub fn update(&mut self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 3 || s[1..] != *self.w_bar.shape() {
            return Err(Error::Argument(format!(
                "batch latents {s:?} do not match mean latent {:?}",
                self.w_bar.shape()
            )));
        }
        let inner = s[1] * s[2];
        let mut mean = vec![0f64; inner];
        for row in batch.data().chunks(inner) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += *v as f64;
            }
        }
        let n = s[0] as f64;
        let first = self.update_count == 0;
        let decay = self.decay as f64;
        for (w, m) in self.w_bar.data_mut().iter_mut().zip(&mean) {
            let m = m / n;
            *w = if first { m as f32 } else { (decay * *w as f64 + (1.0 - decay) * m) as f32 };
        }
        self.update_count += 1;
        Ok(())
    }
}

/// One frozen feature stage: 3×3 conv then activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStage {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    /// Nonnegative per-channel weighting of the normalised squared difference.
    pub channel_weights: Tensor,
}

/// Frozen conv feature stack for perceptual distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualExtractor {
    pub id: String,
    pub stages: Vec<FeatureStage>,
    pub activation: Activation,
}

impl PerceptualExtractor {
    /// Fixed-seed random stack; `channels` lists each stage's width. The first
    /// stage keeps resolution and every later stage halves it.
    pub fn random(seed: u64, channels: &[usize], activation: Activation) -> Self {
        let mut rng = rng_for(seed, "perceptual");
        let mut cin = 3;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let std = (2.0 / (cin * 9) as f32).sqrt();
                let weight = Tensor::randn(&[c, cin, 3, 3], std, &mut rng);
                let bias = Tensor::randn(&[c], 0.1, &mut rng);
                let channel_weights =
                    Tensor::new(&[1, c, 1, 1], (0..c).map(|_| rng.random_range(0.5f32..1.5)).collect()).unwrap();
                cin = c;
                FeatureStage {
                    weight,
                    bias,
                    stride: if i == 0 { 1 } else { 2 },
                    channel_weights,
                }
            })
            .collect();
        let id = format!("random-conv-{}-seed{seed}", channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("x"));
        PerceptualExtractor { id, stages, activation }
    }

    /// Default three-stage test profile.
    pub fn test_profile() -> Self {
        Self::random(0, &[16, 32, 32], Activation::LeakyRelu)
    }

    /// Same weights with a smooth activation, for finite-difference checks.
    pub fn smooth(mut self) -> Self {
        self.activation = Activation::Softplus;
        self
    }

    /// Load a stack written by [`PerceptualExtractor::save`] (JSON).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pe: PerceptualExtractor = serde_json::from_str(&text)?;
        let mut cin = 3;
        for s in &pe.stages {
            let ws = s.weight.shape();
            if ws.len() != 4 || ws[1] != cin || s.bias.shape() != [ws[0]] || s.channel_weights.numel() != ws[0] {
                return Err(Error::Config(format!("{}: inconsistent feature stage shapes", path.display())));
            }
            cin = ws[0];
        }
        Ok(pe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    /// Stage activations of `x` on `tape`.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let w = tape.constant(s.weight.clone());
            let b = tape.constant(s.bias.clone());
            let y = tape.conv2d(h, w, Some(b), s.stride, 1, 1)?;
            h = tape.act(y, self.activation);
            if !tape.value(h).is_finite() {
                return Err(Error::Numeric(format!("non-finite activations in perceptual extractor {}", self.id)));
            }
            out.push(h);
        }
        Ok(out)
    }
}

/// Σ over stages of the spatial mean of the channel-weighted squared
/// difference between unit-normalised feature vectors, averaged over the batch.
pub fn lpips_loss(tape: &mut Tape, x: Var, x_hat: Var, pe: &PerceptualExtractor) -> Result<Var> {
    same_shape(tape, x, x_hat)?;
    let fx = pe.features(tape, x)?;
    let fy = pe.features(tape, x_hat)?;
    let mut total: Option<Var> = None;
    for ((a, b), s) in fx.into_iter().zip(fy).zip(&pe.stages) {
        let na = tape.channel_normalize(a, EPS)?;
        let nb = tape.channel_normalize(b, EPS)?;
        let d = tape.sub(na, nb)?;
        let sq = tape.square(d);
        let cw = tape.constant(s.channel_weights.clone());
        let weighted = tape.conv2d(sq, cw, None, 1, 0, 1)?;
        let m = tape.mean(weighted);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| Error::Config("perceptual extractor has no stages".into()))
}

/// Per-sample perceptual distances for a batch, without gradients.
pub fn lpips_per_sample(x: &Tensor, y: &Tensor, pe: &PerceptualExtractor) -> Result<Vec<f64>> {
    (0..x.dim(0))
        .map(|i| {
            let mut tape = Tape::detached();
            let mut shape = x.shape().to_vec();
            shape[0] = 1;
            let a = tape.constant(x.index0(i).reshape(&shape)?);
            let b = tape.constant(y.index0(i).reshape(&shape)?);
            let l = lpips_loss(&mut tape, a, b, pe)?;
            Ok(tape.scalar(l))
        })
        .collect()
}

/// Small conv critic for the optional adversarial term.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    out: Linear,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, widths: &[usize]) -> Self {
        let mut cin = 3;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(store, rng, &format!("critic.conv{i}"), ConvSpec::new(cin, c, 3).stride(2));
                cin = c;
                conv
            })
            .collect();
        let out = Linear::new(store, rng, "critic.out", cin, 1, 1.0, 0.0);
        Discriminator { convs, out }
    }

    /// Logits `N×1`. With `weights = Some(store)` the critic's parameters enter
    /// as constants (generator-side pass on another store's tape).
    pub fn forward(&self, tape: &mut Tape, x: Var, weights: Option<&ParamStore>) -> Result<Var> {
        let get = |tape: &mut Tape, id| match weights {
            Some(s) => tape.constant(s.get(id).clone()),
            None => tape.param(id),
        };
        let mut h = x;
        for c in &self.convs {
            let w = get(tape, c.weight);
            let w = tape.scale(w, c.gain);
            let b = c.bias.map(|b| get(tape, b));
            let y = tape.conv2d(h, w, b, c.stride, c.pad, c.dilation)?;
            h = tape.act(y, Activation::LeakyRelu);
        }
        let g = tape.global_avg_pool(h)?;
        let n = tape.shape(g)[0];
        let c = tape.shape(g).iter().skip(1).product();
        let g = tape.reshape(g, &[n, c])?;
        let w = get(tape, self.out.weight);
        let w = tape.scale(w, self.out.gain);
        let b = get(tape, self.out.bias);
        tape.linear(g, w, Some(b))
    }
}

fn mean_softplus(tape: &mut Tape, logits: Var, sign: f32) -> Var {
    let s = tape.scale(logits, sign);
    let sp = tape.act(s, Activation::Softplus);
    tape.mean(sp)
}

/// Non-saturating generator loss `mean softplus(−D(x̂))`.
pub fn adversarial_loss(tape: &mut Tape, fake_logits: Var) -> Var {
    mean_softplus(tape, fake_logits, -1.0)
}

/// Critic loss `mean softplus(D(x̂)) + mean softplus(−D(x))`.
pub fn critic_loss(tape: &mut Tape, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let a = mean_softplus(tape, fake_logits, 1.0);
    let b = mean_softplus(tape, real_logits, -1.0);
    tape.add(a, b)
}

/// Scalar components of a composite loss, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub reg: Var,
    pub lpips: Var,
    pub l2: Var,
    pub adv: Option<Var>,
}

/// Adversarial inputs for [`total_loss`]: the critic and its weights.
pub struct AdversarialTerm<'a> {
    pub critic: &'a Discriminator,
    pub weights: &'a ParamStore,
}

/// `λ1·reg + λ2·lpips + λ3·l2 (+ λadv·adv)`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    w_plus: Var,
    ml: &MeanLatent,
    weights: &LossWeights,
    pe: &PerceptualExtractor,
    adversarial: Option<AdversarialTerm>,
) -> Result<LossTerms> {
    let reg = reg_loss(tape, w_plus, &ml.w_bar)?;
    let lpips = lpips_loss(tape, x, x_hat, pe)?;
    let l2 = l2_loss(tape, x, x_hat)?;
    let a = tape.scale(reg, weights.reg as f32);
    let b = tape.scale(lpips, weights.lpips as f32);
    let c = tape.scale(l2, weights.l2 as f32);
    let ab = tape.add(a, b)?;
    let mut total = tape.add(ab, c)?;
    let adv = match adversarial {
        Some(term) if weights.adv > 0.0 => {
            let logits = term.critic.forward(tape, x_hat, Some(term.weights))?;
            let adv = adversarial_loss(tape, logits);
            let d = tape.scale(adv, weights.adv as f32);
            total = tape.add(total, d)?;
            Some(adv)
        }
        _ => None,
    };
    Ok(LossTerms { total, reg, lpips, l2, adv })
}

impl LossTerms {
    pub fn report(&self, tape: &Tape, weights: &LossWeights) -> LossReport {
        LossReport {
            total: tape.scalar(self.total),
            reg: tape.scalar(self.reg),
            lpips: tape.scalar(self.lpips),
            l2: tape.scalar(self.l2),
            adv: self.adv.map(|a| tape.scalar(a)).unwrap_or(0.0),
            weights: *weights,
        }
    }
}
