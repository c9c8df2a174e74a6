//! Style-modulated synthesis network.
//!
//! Layers 1–7 run at the base resolution with dilated 3×3 kernels. Every later
//! resolution gets an upsampling conv followed by a plain conv, and a final
//! 1×1 RGB projection consumes the last style row. Each layer owns an affine
//! map from its style row to a per-input-channel scale (bias initialised to 1)
//! and a per-output-channel shift. Weights are demodulated per sample.

use rand::Rng;

use crate::autograd::{Activation, Tape, Var};
use crate::config::{ModelConfig, CONST_LAYERS};
use crate::encoder::LatentVars;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEMOD_EPS: f32 = 1e-8;

/// Learned map from a style row to a channel scale and a channel shift.
#[derive(Clone, Debug)]
pub struct StyleAffine {
    pub scale: Linear,
    pub shift: Linear,
}

/// A modulated convolution plus its style affine.
#[derive(Clone, Debug)]
pub struct StyledConv {
    pub weight: ParamId,
    pub affine: StyleAffine,
    pub kernel: usize,
    pub dilation: usize,
    pub upsample: bool,
    pub demodulate: bool,
    /// Run-time weight multiplier; 1 under demodulation, which cancels it anyway.
    pub gain: f32,
}

impl StyledConv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        style_dim: usize,
        upsample: bool,
        demodulate: bool,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f32;
        let std = if demodulate { 1.0 / fan_in.sqrt() } else { 1.0 };
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, kernel, kernel], std, rng));
        let gain = if demodulate { 1.0 } else { 1.0 / ((cin * kernel * kernel) as f32).sqrt() };
        let scale = Linear::new(store, rng, &format!("{name}.affine.scale"), style_dim, cin, 1.0, 1.0);
        let shift = Linear::new(store, rng, &format!("{name}.affine.shift"), style_dim, cout, 0.1, 0.0);
        StyledConv {
            weight,
            affine: StyleAffine { scale, shift },
            kernel,
            dilation,
            upsample,
            demodulate,
            gain,
        }
    }
}

/// `N×C×H×W → N×C'×H×W`: scale input channels by `A(w)`, convolve with
/// padding `dilation·(k−1)/2`, renormalise each output filter to unit L2
/// norm per sample, then add the style shift. No activation.
pub fn modulated_conv(tape: &mut Tape, feat: Var, style_row: Var, layer: &StyledConv) -> Result<Var> {
    let s = layer.affine.scale.forward(tape, style_row)?;
    let x = tape.mul_channel(feat, s)?;
    let mut w = tape.param(layer.weight);
    if layer.gain != 1.0 {
        w = tape.scale(w, layer.gain);
    }
    let pad = layer.dilation * (layer.kernel - 1) / 2;
    let mut y = tape.conv2d(x, w, None, 1, pad, layer.dilation)?;
    if layer.demodulate {
        let wsq = tape.kernel_sq_sum(w)?;
        let s2 = tape.square(s);
        let norm = tape.linear(s2, wsq, None)?;
        let d = tape.rsqrt(norm, DEMOD_EPS);
        y = tape.mul_channel(y, d)?;
    }
    let b = layer.affine.shift.forward(tape, style_row)?;
    tape.add_channel(y, b)
}

/// Synthesis network.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: ModelConfig,
    layers: Vec<StyledConv>,
    to_rgb: StyledConv,
}

/// Result of a synthesis pass, with per-layer bookkeeping for invariant checks.
pub struct Synthesis {
    pub image: Var,
    /// Spatial size of every styled layer's input and output, in order.
    pub layer_sizes: Vec<(usize, usize)>,
    pub slots_used: usize,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.generator.channels;
        let d = cfg.style_dim;
        let mut layers = Vec::new();
        for (i, &dil) in cfg.generator.dilations.iter().enumerate() {
            layers.push(StyledConv::new(store, rng, &format!("generator.const{i}"), ch[0], ch[0], 3, dil, d, false, true));
        }
        for j in 1..ch.len() {
            layers.push(StyledConv::new(store, rng, &format!("generator.up{j}.conv0"), ch[j - 1], ch[j], 3, 1, d, true, true));
            layers.push(StyledConv::new(store, rng, &format!("generator.up{j}.conv1"), ch[j], ch[j], 3, 1, d, false, true));
        }
        let last = *ch.last().unwrap();
        let to_rgb = StyledConv::new(store, rng, "generator.to_rgb", last, 3, 1, 1, d, false, false);
        Ok(Generator { cfg: cfg.clone(), layers, to_rgb })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[StyledConv] {
        &self.layers
    }

    pub fn n_slots(&self) -> usize {
        self.layers.len() + 1
    }

    /// One styled layer (1-based index) applied to `feat` with `style_row`, including activation.
    pub fn layer_forward(&self, tape: &mut Tape, index: usize, feat: Var, style_row: Var) -> Result<Var> {
        let layer = self
            .layers
            .get(index.wrapping_sub(1))
            .ok_or_else(|| Error::Argument(format!("layer index {index} out of range")))?;
        let x = if layer.upsample { tape.upsample(feat, 2)? } else { feat };
        let y = modulated_conv(tape, x, style_row, layer)?;
        Ok(tape.act(y, self.cfg.activation))
    }

    /// Render `N×3×S×S` images in `[-1, 1]` from a latent code.
    pub fn synthesize(&self, tape: &mut Tape, code: &LatentVars) -> Result<Synthesis> {
        let ws = tape.shape(code.w_plus).to_vec();
        if ws.len() != 3 || ws[1] != self.n_slots() || ws[2] != self.cfg.style_dim {
            return Err(Error::Config(format!(
                "latent has shape {ws:?}, generator needs N×{}×{}",
                self.n_slots(),
                self.cfg.style_dim
            )));
        }
        let fs = tape.shape(code.f).to_vec();
        let r0 = self.cfg.base_resolution;
        if fs.len() != 4 || fs[0] != ws[0] || fs[1] != self.cfg.base_channels() || fs[2] != r0 || fs[3] != r0 {
            return Err(Error::Shape(format!(
                "base feature {fs:?} does not match N×{}×{r0}×{r0}",
                self.cfg.base_channels()
            )));
        }
        for (res, v) in &code.skips {
            let want = self.cfg.channels_at(*res);
            let s = tape.shape(*v);
            if want != Some(s[1]) || s[2] != *res {
                return Err(Error::Shape(format!("skip map {s:?} does not fit resolution {res}")));
            }
        }

        let mut h = code.f;
        let mut slot = 0;
        let mut layer_sizes = Vec::with_capacity(self.layers.len());
        let mut injected = vec![false; code.skips.len()];
        for index in 1..=self.layers.len() {
            let row = tape.select_row(code.w_plus, slot)?;
            slot += 1;
            let in_size = tape.shape(h)[2];
            h = self.layer_forward(tape, index, h, row)?;
            let out_size = tape.shape(h)[2];
            if index <= CONST_LAYERS && (in_size != r0 || out_size != r0) {
                return Err(Error::Shape(format!(
                    "layer {index} changed resolution {in_size}→{out_size}; layers 1–{CONST_LAYERS} stay at {r0}"
                )));
            }
            layer_sizes.push((in_size, out_size));
            // a skip joins after the first conv at its resolution
            let first_at_res = index == 1 || self.layers[index - 1].upsample;
            if first_at_res {
                for (k, (res, v)) in code.skips.iter().enumerate() {
                    if *res == out_size && !injected[k] {
                        h = tape.add(h, *v)?;
                        injected[k] = true;
                    }
                }
            }
        }
        let row = tape.select_row(code.w_plus, slot)?;
        slot += 1;
        let rgb = modulated_conv(tape, h, row, &self.to_rgb)?;
        let image = tape.act(rgb, Activation::Tanh);
        if slot != self.n_slots() {
            return Err(Error::Config(format!("consumed {slot} style rows, expected {}", self.n_slots())));
        }
        if injected.iter().any(|i| !i) {
            return Err(Error::Config("a skip map did not match any generator resolution".into()));
        }
        Ok(Synthesis { image, layer_sizes, slots_used: slot })
    }

    /// Analytic receptive field after constant-resolution layer `layer_index` (1..=7).
    pub fn receptive_field(&self, layer_index: usize) -> Result<usize> {
        receptive_field(&self.cfg.generator.dilations, layer_index)
    }
}

/// `1 + Σ_{j ≤ i} 2·dilation[j]` for 3×3 kernels.
pub fn receptive_field(dilations: &[usize; CONST_LAYERS], layer_index: usize) -> Result<usize> {
    if !(1..=CONST_LAYERS).contains(&layer_index) {
        return Err(Error::Argument(format!("layer index must be in 1..={CONST_LAYERS}, got {layer_index}")));
    }
    Ok(1 + dilations[..layer_index].iter().map(|d| 2 * d).sum::<usize>())
}
