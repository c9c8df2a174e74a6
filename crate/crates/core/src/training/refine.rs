//! Per-image refinement of the base feature and style rows against a frozen
//! generator, minimising the perceptual distance to the target.

use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::imaging::{batch, ImageTensor};
use crate::losses::{lpips_loss, lpips_per_sample, PerceptualExtractor};
use crate::model::{LatentCode, Model};
use crate::nn::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineOptions {
    pub steps: usize,
    pub lr: f32,
    /// Stop an image once its loss exceeds this multiple of the initial loss ...
    pub divergence_factor: f64,
    /// ... for this many consecutive steps.
    pub divergence_patience: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            steps: 200,
            lr: 0.01,
            divergence_factor: 10.0,
            divergence_patience: 20,
        }
    }
}

/// Best iterate for one image. `code` carries `f̂`, `ŵ⁺` and the untouched skips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub code: LatentCode,
    /// `(step, perceptual distance)` of every evaluated iterate; step 0 is the encoder output.
    pub trace: Vec<(usize, f64)>,
    pub best_step: usize,
    pub diverged: bool,
}

impl RefineResult {
    pub fn initial(&self) -> f64 {
        self.trace[0].1
    }

    pub fn best(&self) -> f64 {
        self.trace[self.best_step].1
    }

    /// Running minimum of the trace.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut m = f64::INFINITY;
        self.trace
            .iter()
            .map(|&(_, v)| {
                m = m.min(v);
                m
            })
            .collect()
    }
}

/// Refine one image using the model, skip count and perceptual profile stored in a checkpoint.
pub fn refine(ck: &Checkpoint, x: &ImageTensor, opts: &RefineOptions) -> Result<RefineResult> {
    let model = ck.model()?;
    let pe = ck.config.perceptual_extractor()?;
    let mut out = refine_batch(&model, ck.config.delta, &[x.clone()], &pe, opts)?;
    Ok(out.remove(0))
}

/// Refine a batch jointly. The summed loss keeps images independent: every
/// op acts per sample and Adam is elementwise.
pub fn refine_batch(
    model: &Model,
    delta: usize,
    images: &[ImageTensor],
    pe: &PerceptualExtractor,
    opts: &RefineOptions,
) -> Result<Vec<RefineResult>> {
    if images.is_empty() {
        return Err(Error::Argument("nothing to refine".into()));
    }
    if let Some(bad) = images.iter().find(|i| i.size() != model.cfg.image_size) {
        return Err(Error::Resolution(format!(
            "image is {} pixels, model expects {}",
            bad.size(),
            model.cfg.image_size
        )));
    }
    let weights_before = model.store.checksum();
    let x = batch(&images.iter().collect::<Vec<_>>())?;
    let n = images.len();
    let mut code = model.encode(&x, delta)?;
    let mut best: Vec<LatentCode> = (0..n).map(|i| code.item(i)).collect();
    let mut best_val = vec![f64::INFINITY; n];
    let mut best_step = vec![0usize; n];
    let mut traces: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(opts.steps + 1); n];
    let mut over = vec![0usize; n];
    let mut stopped = vec![false; n];
    let mut adam = Adam::new(0.9);

    for step in 0..=opts.steps {
        let mut tape = Tape::frozen(&model.store);
        let vars = code.to_vars(&mut tape, false);
        let w = tape.leaf(code.w_plus.clone());
        let f = tape.leaf(code.f.clone());
        let vars = crate::encoder::LatentVars { w_plus: w, f, ..vars };
        let img = model.generator.synthesize(&mut tape, &vars)?.image;
        let values = lpips_per_sample(&x, tape.value(img), pe)?;
        for i in 0..n {
            if stopped[i] {
                continue;
            }
            let v = values[i];
            if !v.is_finite() {
                stopped[i] = true;
                continue;
            }
            traces[i].push((step, v));
            if v < best_val[i] {
                best_val[i] = v;
                best_step[i] = traces[i].len() - 1;
                best[i] = code.item(i);
            }
            if v > opts.divergence_factor * traces[i][0].1 {
                over[i] += 1;
                if over[i] >= opts.divergence_patience {
                    stopped[i] = true;
                }
            } else {
                over[i] = 0;
            }
        }
        if step == opts.steps || stopped.iter().all(|&s| s) {
            break;
        }
        let xv = tape.constant(x.clone());
        let l = lpips_loss(&mut tape, xv, img, pe)?;
        let l = tape.scale(l, n as f32);
        let grads = tape.backward(l)?;
        let gw = grads.get(w).cloned();
        let gf = grads.get(f).cloned();
        drop(tape);
        let LatentCode { w_plus, f, .. } = &mut code;
        adam.step_tensors(&mut [w_plus, f], &[gw, gf], opts.lr);
    }
    if model.store.checksum() != weights_before {
        return Err(Error::Numeric("network weights changed during refinement".into()));
    }
    if traces.iter().any(|t| t.is_empty()) {
        return Err(Error::Numeric("initial perceptual distance is not finite".into()));
    }
    Ok(best
        .into_iter()
        .zip(traces)
        .zip(best_step)
        .zip(stopped)
        .map(|(((code, trace), best_step), stopped)| RefineResult {
            diverged: stopped && trace.len() <= opts.steps,
            code,
            trace,
            best_step,
        })
        .collect())
}
