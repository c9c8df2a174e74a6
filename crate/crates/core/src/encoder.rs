//! Residual backbone, feature pyramid, per-slot style heads, base feature
//! and skip projections.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Linear, ParamStore};

/// One residual block with two 3×3 convolutions.
#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl BasicBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), ConvSpec::new(cin, cout, 3).stride(stride));
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), ConvSpec::new(cout, cout, 3));
        // scale the residual branch down so stacked blocks start near identity
        for t in store.get_mut(conv2.weight).data_mut() {
            *t *= 0.5;
        }
        let shortcut = (cin != cout || stride != 1).then(|| {
            Conv2d::new(store, rng, &format!("{name}.shortcut"), ConvSpec::new(cin, cout, 1).stride(stride))
        });
        BasicBlock { conv1, conv2, shortcut }
    }

    fn forward(&self, tape: &mut Tape, x: Var, act: crate::autograd::Activation) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = tape.act(h, act);
        let h = self.conv2.forward(tape, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(tape, x)?,
            None => x,
        };
        let y = tape.add(h, s)?;
        Ok(tape.act(y, act))
    }
}

/// Backbone outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct BackboneStages(pub [Var; 4]);

/// Pyramid levels: coarsest (stride 32), middle (16), finest (8).
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub low: Var,
    pub mid: Var,
    pub high: Var,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [Var; 3] {
        [self.low, self.mid, self.high]
    }
}

/// Latent code on a tape: `w_plus` is `N×n×d`, `f` is `N×C0×R0×R0`,
/// `skips` pairs each projected map with its generator resolution.
#[derive(Clone, Debug)]
pub struct LatentVars {
    pub w_plus: Var,
    pub f: Var,
    pub skips: Vec<(usize, Var)>,
}

#[derive(Clone, Debug)]
struct StyleHead {
    reduce: Conv2d,
    down: Vec<Conv2d>,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: ModelConfig,
    stem: Conv2d,
    stages: Vec<Vec<BasicBlock>>,
    lateral: [Conv2d; 3],
    smooth: [Conv2d; 3],
    heads: Vec<(usize, StyleHead)>,
    base: Conv2d,
    skip_proj: [Conv2d; 3],
}

/// Resample an `N×C×s×s` map to `target×target` by nearest upsampling or 2×2 averaging.
pub fn resample(tape: &mut Tape, x: Var, target: usize) -> Result<Var> {
    let s = tape.shape(x)[2];
    if s == target {
        Ok(x)
    } else if s < target {
        tape.upsample(x, target / s)
    } else {
        let mut v = x;
        let mut cur = s;
        while cur > target {
            v = tape.avg_pool2(v)?;
            cur /= 2;
        }
        Ok(v)
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let w = e.backbone_widths;
        let stem = Conv2d::new(store, rng, "encoder.stem", ConvSpec::new(3, w[0], 3).stride(2));
        let mut stages = Vec::new();
        let mut cin = w[0];
        for (i, &cout) in w.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..e.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(store, rng, &format!("encoder.stage{i}.block{b}"), cin, cout, stride));
                cin = cout;
            }
            stages.push(blocks);
        }
        let cp = e.pyramid_channels;
        // pyramid levels low/mid/high read stages 3/2/1 (strides 32/16/8)
        let lateral = [3, 2, 1].map(|s| Conv2d::new(store, rng, &format!("encoder.fpn.lateral{s}"), ConvSpec::new(w[s], cp, 1)));
        let smooth = [3, 2, 1].map(|s| Conv2d::new(store, rng, &format!("encoder.fpn.smooth{s}"), ConvSpec::new(cp, cp, 3)));

        let level_res = [cfg.image_size / 32, cfg.image_size / 16, cfg.image_size / 8];
        let counts = [e.styles_low, e.styles_mid, cfg.styles_high()];
        let mut heads = Vec::new();
        let mut slot = 0;
        for (level, (&count, &res)) in counts.iter().zip(&level_res).enumerate() {
            for _ in 0..count {
                let name = format!("encoder.map.slot{slot}");
                let reduce = Conv2d::new(store, rng, &format!("{name}.reduce"), ConvSpec::new(cp, e.head_channels, 1));
                let steps = res.trailing_zeros() as usize;
                let down = (0..steps)
                    .map(|k| {
                        Conv2d::new(store, rng, &format!("{name}.down{k}"), ConvSpec::new(e.head_channels, e.head_channels, 3).stride(2))
                    })
                    .collect();
                let out = Linear::new(store, rng, &format!("{name}.out"), e.head_channels, cfg.style_dim, 1.0, 0.0);
                heads.push((level, StyleHead { reduce, down, out }));
                slot += 1;
            }
        }
        let base_in = if e.concat_high { 2 * cp } else { cp };
        let base = Conv2d::new(store, rng, "encoder.base", ConvSpec::new(base_in, cfg.base_channels(), 3).stride(2));
        let skip_proj = [0usize, 1, 2].map(|k| {
            let c = cfg.channels_at(cfg.skip_resolution(k)).unwrap_or(cfg.base_channels());
            let conv = Conv2d::new(store, rng, &format!("encoder.skip{k}"), ConvSpec::new(cp, c, 1));
            // skips start as a small perturbation of the generator stream
            for t in store.get_mut(conv.weight).data_mut() {
                *t *= 0.1;
            }
            conv
        });
        Ok(Encoder {
            cfg: cfg.clone(),
            stem,
            stages,
            lateral,
            smooth,
            heads,
            base,
            skip_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Four residual stages. Requires an input of at least 32 pixels.
    pub fn backbone_forward(&self, tape: &mut Tape, x: Var) -> Result<BackboneStages> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("encoder expects N×3×H×W, got {s:?}")));
        }
        if s[2] < 32 || s[2] != s[3] {
            return Err(Error::Resolution(format!("encoder input must be square and >= 32, got {}×{}", s[2], s[3])));
        }
        let act = self.cfg.activation;
        let h = self.stem.forward(tape, x)?;
        let mut h = tape.act(h, act);
        let mut outs = Vec::with_capacity(4);
        for blocks in &self.stages {
            for b in blocks {
                h = b.forward(tape, h, act)?;
            }
            outs.push(h);
        }
        Ok(BackboneStages([outs[0], outs[1], outs[2], outs[3]]))
    }

    /// Lateral 1×1 projections, top-down nearest 2× upsample-and-add, 3×3 smoothing.
    pub fn fpn_forward(&self, tape: &mut Tape, stages: &BackboneStages) -> Result<FeaturePyramid> {
        let src = [stages.0[3], stages.0[2], stages.0[1]];
        let w = self.cfg.encoder.backbone_widths;
        for (want, v) in [w[3], w[2], w[1]].into_iter().zip(src) {
            if tape.shape(v)[1] != want {
                return Err(Error::Config(format!(
                    "backbone stage has {} channels, pyramid expects {want}",
                    tape.shape(v)[1]
                )));
            }
        }
        let l_low = self.lateral[0].forward(tape, src[0])?;
        let l_mid = self.lateral[1].forward(tape, src[1])?;
        let l_high = self.lateral[2].forward(tape, src[2])?;
        let up = tape.upsample(l_low, 2)?;
        let p_mid = tape.add(l_mid, up)?;
        let up = tape.upsample(p_mid, 2)?;
        let p_high = tape.add(l_high, up)?;
        Ok(FeaturePyramid {
            low: self.smooth[0].forward(tape, l_low)?,
            mid: self.smooth[1].forward(tape, p_mid)?,
            high: self.smooth[2].forward(tape, p_high)?,
        })
    }

    /// `N×n×d` style rows; slot `i` reads only the pyramid level it is assigned to.
    pub fn map_to_styles(&self, tape: &mut Tape, p: &FeaturePyramid) -> Result<Var> {
        let act = self.cfg.activation;
        let levels = p.levels();
        let mut rows = Vec::with_capacity(self.heads.len());
        for (level, head) in &self.heads {
            let h = head.reduce.forward(tape, levels[*level])?;
            let mut h = tape.act(h, act);
            for conv in &head.down {
                h = conv.forward(tape, h)?;
                h = tape.act(h, act);
            }
            let n = tape.shape(h)[0];
            let c = tape.shape(h)[1];
            let h = tape.reshape(h, &[n, c])?;
            rows.push(head.out.forward(tape, h)?);
        }
        tape.stack_rows(&rows)
    }

    /// Stride-2 3×3 conv over the middle level (optionally concatenated with the
    /// finest level), both resampled to twice the base resolution.
    pub fn base_feature(&self, tape: &mut Tape, p: &FeaturePyramid) -> Result<Var> {
        let r2 = 2 * self.cfg.base_resolution;
        let mid = resample(tape, p.mid, r2)?;
        let input = if self.cfg.encoder.concat_high {
            let high = resample(tape, p.high, r2)?;
            tape.concat_channels(mid, high)?
        } else {
            mid
        };
        self.base.forward(tape, input)
    }

    /// Projections of the first `delta` pyramid levels (coarse to fine) to the
    /// generator width at their target resolutions.
    pub fn skips(&self, tape: &mut Tape, p: &FeaturePyramid, delta: usize) -> Result<Vec<(usize, Var)>> {
        if delta > 3 {
            return Err(Error::Argument(format!("delta must be in 0..=3, got {delta}")));
        }
        if delta > self.cfg.max_delta() {
            return Err(Error::Argument(format!(
                "delta {delta} needs generator resolution {} which exceeds the output",
                self.cfg.skip_resolution(delta - 1)
            )));
        }
        let levels = p.levels();
        (0..delta)
            .map(|k| {
                let res = self.cfg.skip_resolution(k);
                let v = self.skip_proj[k].forward(tape, levels[k])?;
                Ok((res, resample(tape, v, res)?))
            })
            .collect()
    }

    /// Full encoding path for an `N×3×S×S` batch.
    pub fn encode(&self, tape: &mut Tape, x: Var, delta: usize) -> Result<LatentVars> {
        if delta > 3 {
            return Err(Error::Argument(format!("delta must be in 0..=3, got {delta}")));
        }
        let s = tape.shape(x).to_vec();
        if s.len() == 4 && s[2] != self.cfg.image_size {
            return Err(Error::Resolution(format!(
                "model expects {}-pixel input, got {}",
                self.cfg.image_size, s[2]
            )));
        }
        let stages = self.backbone_forward(tape, x)?;
        let p = self.fpn_forward(tape, &stages)?;
        let w_plus = self.map_to_styles(tape, &p)?;
        let f = self.base_feature(tape, &p)?;
        let skips = self.skips(tape, &p, delta)?;
        Ok(LatentVars { w_plus, f, skips })
    }

    #[cfg(test)]
    pub(crate) fn lateral_convs(&self) -> &[Conv2d; 3] {
        &self.lateral
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_directional;
    use crate::autograd::Activation;
    use crate::tensor::Tensor;
    use crate::util::rng_for;

    fn build(cfg: &ModelConfig) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut rng_for(1, "enc")).unwrap();
        (store, enc)
    }

    fn input(size: usize, seed: u64) -> Tensor {
        Tensor::randn(&[1, 3, size, size], 0.5, &mut rng_for(seed, "x")).map(|v| v.clamp(-1.0, 1.0))
    }

    #[test]
    fn desk_stage_sizes_and_pyramid() {
        let cfg = ModelConfig::desk();
        let (store, enc) = build(&cfg);
        let mut tape = Tape::frozen(&store);
        let x = tape.constant(input(64, 0));
        let st = enc.backbone_forward(&mut tape, x).unwrap();
        let sizes: Vec<usize> = st.0.iter().map(|v| tape.shape(*v)[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        let p = enc.fpn_forward(&mut tape, &st).unwrap();
        assert_eq!(tape.shape(p.low), &[1, 64, 2, 2]);
        assert_eq!(tape.shape(p.mid), &[1, 64, 4, 4]);
        assert_eq!(tape.shape(p.high), &[1, 64, 8, 8]);
        assert!(tape.value(p.high).is_finite());
        let code = enc.encode(&mut tape, x, 3).unwrap();
        assert_eq!(tape.shape(code.w_plus), &[1, 14, 64]);
        assert_eq!(tape.shape(code.f), &[1, 64, 8, 8]);
        let res: Vec<usize> = code.skips.iter().map(|(r, _)| *r).collect();
        assert_eq!(res, vec![8, 16, 32]);
        assert_eq!(tape.shape(code.skips[2].1), &[1, 32, 32, 32]);
    }

    #[test]
    fn small_input_is_a_resolution_error() {
        let cfg = ModelConfig::tiny();
        let (store, enc) = build(&cfg);
        let mut tape = Tape::frozen(&store);
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(matches!(enc.backbone_forward(&mut tape, x), Err(Error::Resolution(_))));
    }

    #[test]
    fn delta_out_of_range() {
        let cfg = ModelConfig::tiny();
        let (store, enc) = build(&cfg);
        let mut tape = Tape::frozen(&store);
        let x = tape.constant(input(32, 0));
        assert!(matches!(enc.encode(&mut tape, x, 4), Err(Error::Argument(_))));
        let code = enc.encode(&mut tape, x, 0).unwrap();
        assert!(code.skips.is_empty());
    }

    #[test]
    fn style_rows_read_only_their_level() {
        let cfg = ModelConfig::tiny();
        let (store, enc) = build(&cfg);
        let mut tape = Tape::frozen(&store);
        let x = tape.constant(input(32, 0));
        let st = enc.backbone_forward(&mut tape, x).unwrap();
        let p = enc.fpn_forward(&mut tape, &st).unwrap();
        let base = enc.map_to_styles(&mut tape, &p).unwrap();
        let base = tape.value(base).clone();
        let n = cfg.n_slots();
        let d = cfg.style_dim;
        let ranges = [0..3, 3..7, 7..n];
        for level in 0..3 {
            let mut q = p;
            let v = p.levels()[level];
            let bumped = tape.value(v).map(|t| t + 0.3);
            let c = tape.constant(bumped);
            match level {
                0 => q.low = c,
                1 => q.mid = c,
                _ => q.high = c,
            }
            let w = enc.map_to_styles(&mut tape, &q).unwrap();
            let w = tape.value(w);
            for row in 0..n {
                let diff: f32 = (0..d)
                    .map(|j| (w.data()[row * d + j] - base.data()[row * d + j]).abs())
                    .sum();
                assert_eq!(diff > 0.0, ranges[level].contains(&row), "level {level} row {row}");
            }
        }
    }

    #[test]
    fn zero_laterals_make_pyramid_input_independent() {
        let cfg = ModelConfig::tiny();
        let (mut store, enc) = build(&cfg);
        for conv in enc.lateral_convs() {
            store.get_mut(conv.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let run = |seed| {
            let mut tape = Tape::frozen(&store);
            let x = tape.constant(input(32, seed));
            let st = enc.backbone_forward(&mut tape, x).unwrap();
            let p = enc.fpn_forward(&mut tape, &st).unwrap();
            p.levels().map(|v| tape.value(v).clone())
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn base_feature_of_zero_mid_is_bias() {
        let mut cfg = ModelConfig::tiny();
        cfg.encoder.concat_high = false;
        let (mut store, enc) = build(&cfg);
        let bias = enc.base.bias.unwrap();
        store.get_mut(bias).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.1);
        let mut tape = Tape::frozen(&store);
        let z = tape.constant(Tensor::zeros(&[1, 8, 2, 2]));
        let p = FeaturePyramid { low: z, mid: z, high: z };
        let f = enc.base_feature(&mut tape, &p).unwrap();
        let f = tape.value(f);
        assert_eq!(f.shape(), &[1, 8, 4, 4]);
        for (i, plane) in f.data().chunks(16).enumerate() {
            assert!(plane.iter().all(|&v| v == i as f32 * 0.1));
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let (store, enc) = build(&cfg);
        let x = input(32, 4);
        let run = || {
            let mut tape = Tape::frozen(&store);
            let xv = tape.constant(x.clone());
            let c = enc.encode(&mut tape, xv, 2).unwrap();
            (tape.value(c.w_plus).clone(), tape.value(c.f).clone(), tape.value(c.skips[1].1).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn style_sum_gradient_matches_finite_differences() {
        let mut cfg = ModelConfig::tiny();
        cfg.activation = Activation::Softplus;
        let (store, enc) = build(&cfg);
        let x = input(32, 5);
        let err = check_directional(&|| Tape::frozen(&store), &x, 0.2, 8, &|tape, xv| {
            let st = enc.backbone_forward(tape, xv)?;
            let p = enc.fpn_forward(tape, &st)?;
            let w = enc.map_to_styles(tape, &p)?;
            let m = tape.mean(w);
            let n = tape.shape(w).iter().product::<usize>() as f32;
            Ok(tape.scale(m, n))
        })
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}
