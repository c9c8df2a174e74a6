//! Joint encoder/generator training, checkpoints and per-image latent refinement.

mod checkpoint;
mod refine;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Sidecar, CHECKPOINT_VERSION};
pub use refine::{refine, refine_batch, RefineOptions, RefineResult};

use crate::autograd::Tape;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::imaging::{batch, save_grid, unbatch, DatasetManifest, ImageTensor, Split};
use crate::losses::{critic_loss, total_loss, AdversarialTerm, Discriminator, LossReport, LossWeights, MeanLatent, PerceptualExtractor};
use crate::model::{LatentCode, LatentPrior, Model};
use crate::nn::{Adam, ParamStore};
use crate::util::{digest_json, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr0: f32,
    pub beta1: f32,
    pub lr_min: f32,
    pub total_steps: u64,
    pub weights: LossWeights,
    /// Number of encoder skip maps fed to the generator (0–3).
    pub delta: usize,
    pub seed: u64,
    pub ema_decay: f32,
    /// Perceptual extractor weights (JSON); the fixed random test profile when absent.
    pub perceptual: Option<PathBuf>,
    /// Snapshot cadence; `max(total_steps / 20, 50)` when absent.
    pub snapshot_every: Option<u64>,
    /// Channel widths of the optional critic.
    pub critic_widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 8,
            lr0: 1e-3,
            beta1: 0.9,
            lr_min: 1e-5,
            total_steps: 2000,
            weights: LossWeights::default(),
            delta: 1,
            seed: 0,
            ema_decay: 0.995,
            perceptual: None,
            snapshot_every: None,
            critic_widths: vec![16, 32, 64],
        }
    }
}

impl TrainConfig {
    /// CPU-sized defaults at 64 pixels.
    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_min < self.lr0) || self.lr_min < 0.0 {
            return Err(Error::Config(format!("need 0 <= lr_min < lr0, got {} and {}", self.lr_min, self.lr0)));
        }
        if self.delta > self.model.max_delta() {
            return Err(Error::Config(format!(
                "delta {} exceeds the {} skips this model supports",
                self.delta,
                self.model.max_delta()
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn snapshot_interval(&self) -> u64 {
        self.snapshot_every.unwrap_or((self.total_steps / 20).max(50)).max(1)
    }

    pub fn digest(&self) -> Result<String> {
        digest_json(self)
    }

    pub fn perceptual_extractor(&self) -> Result<PerceptualExtractor> {
        match &self.perceptual {
            Some(p) => PerceptualExtractor::load(p),
            None => Ok(PerceptualExtractor::test_profile()),
        }
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`, clamped at `lr_min` past the end.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f32, lr_min: f32) -> f32 {
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    let t = step as f64 / total_steps as f64;
    (lr_min as f64 + 0.5 * (lr0 - lr_min) as f64 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

/// Sample indices of the batch at `step`: a pure function of `(seed, step)`.
/// Each pass over the data uses its own seeded permutation.
pub struct BatchOrder {
    seed: u64,
    n: usize,
    batch: usize,
    perms: HashMap<u64, Vec<usize>>,
}

impl BatchOrder {
    pub fn new(seed: u64, n: usize, batch: usize) -> Self {
        BatchOrder {
            seed,
            n,
            batch,
            perms: HashMap::new(),
        }
    }

    fn perm(&mut self, epoch: u64) -> &[usize] {
        let (seed, n) = (self.seed, self.n);
        self.perms.entry(epoch).or_insert_with(|| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng_for(seed, &format!("epoch{epoch}")));
            p
        })
    }

    pub fn indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.n as u64;
        (0..self.batch as u64)
            .map(|j| {
                let pos = step * self.batch as u64 + j;
                let epoch = pos / n;
                self.perms.retain(|e, _| *e + 1 >= epoch);
                self.perm(epoch)[(pos % n) as usize]
            })
            .collect()
    }
}

/// Optional adversarial critic with its own weights and optimiser.
#[derive(Clone, Debug)]
pub struct Critic {
    pub net: Discriminator,
    pub store: ParamStore,
    pub adam: Adam,
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub mean_latent: MeanLatent,
    pub critic: Option<Critic>,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model, cfg.seed)?;
        let critic = (cfg.weights.adv > 0.0).then(|| {
            let mut store = ParamStore::new();
            let net = Discriminator::new(&mut store, &mut rng_for(cfg.seed, "critic.init"), &cfg.critic_widths);
            Critic {
                net,
                store,
                adam: Adam::new(cfg.beta1),
            }
        });
        Ok(TrainState {
            cfg: cfg.clone(),
            mean_latent: MeanLatent::new(cfg.model.n_slots(), cfg.model.style_dim, cfg.ema_decay),
            model,
            adam: Adam::new(cfg.beta1),
            critic,
            step: 0,
        })
    }
}

/// Forward pass and loss terms without any update; used for step-0 checks
/// and evaluation.
pub fn evaluate_loss(state: &TrainState, x: &crate::tensor::Tensor, pe: &PerceptualExtractor) -> Result<LossReport> {
    let mut tape = Tape::frozen(&state.model.store);
    let xv = tape.constant(x.clone());
    let code = state.model.encoder.encode(&mut tape, xv, state.cfg.delta)?;
    let s = state.model.generator.synthesize(&mut tape, &code)?;
    let adv = state.critic.as_ref().map(|c| AdversarialTerm {
        critic: &c.net,
        weights: &c.store,
    });
    let terms = total_loss(&mut tape, xv, s.image, code.w_plus, &state.mean_latent, &state.cfg.weights, pe, adv)?;
    Ok(terms.report(&tape, &state.cfg.weights))
}

/// Encode, synthesise, score, back-propagate and apply one Adam update; then
/// fold the detached batch latents into the mean latent.
pub fn train_step(state: &mut TrainState, x: &crate::tensor::Tensor, pe: &PerceptualExtractor) -> Result<LossReport> {
    let lr = cosine_lr(state.step, state.cfg.total_steps, state.cfg.lr0, state.cfg.lr_min);
    let (report, grads, w_plus, fake) = {
        let mut tape = Tape::new(&state.model.store);
        let xv = tape.constant(x.clone());
        let code = state.model.encoder.encode(&mut tape, xv, state.cfg.delta)?;
        let s = state.model.generator.synthesize(&mut tape, &code)?;
        let adv = state.critic.as_ref().map(|c| AdversarialTerm {
            critic: &c.net,
            weights: &c.store,
        });
        let terms = total_loss(&mut tape, xv, s.image, code.w_plus, &state.mean_latent, &state.cfg.weights, pe, adv)?;
        let report = terms.report(&tape, &state.cfg.weights);
        if !report.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: {}",
                state.step,
                serde_json::to_string(&report).unwrap_or_default()
            )));
        }
        let grads = tape.backward(terms.total)?.into_params();
        let fake = state.critic.is_some().then(|| tape.value(s.image).clone());
        (report, grads, tape.value(code.w_plus).clone(), fake)
    };
    state.adam.step(&mut state.model.store, &grads, lr);
    state.mean_latent.update(&w_plus)?;
    if let (Some(c), Some(fake)) = (state.critic.as_mut(), fake) {
        let grads = {
            let mut tape = Tape::new(&c.store);
            let real = tape.constant(x.clone());
            let fake = tape.constant(fake);
            let lr_real = c.net.forward(&mut tape, real, None)?;
            let lr_fake = c.net.forward(&mut tape, fake, None)?;
            let l = critic_loss(&mut tape, lr_real, lr_fake)?;
            tape.backward(l)?.into_params()
        };
        c.adam.step(&mut c.store, &grads, lr);
    }
    state.step += 1;
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub lr: f32,
    pub total: f64,
    pub reg: f64,
    pub lpips: f64,
    pub l2: f64,
    pub adv: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for the log, snapshot grids and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint; its config digest must match.
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) after this many total steps, as an interruption would.
    pub stop_after: Option<u64>,
    /// Skip fitting the latent prior at the end.
    pub skip_prior: bool,
}

pub struct FitOutcome {
    pub state: TrainState,
    pub log: Vec<LogLine>,
    pub prior: Option<LatentPrior>,
}

impl FitOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_state(&self.state, self.prior.clone())
    }
}

/// Images of the manifest's training split at the model resolution.
pub fn load_split(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Vec<ImageTensor>> {
    manifest
        .split(split)
        .map(|e| crate::imaging::load_image(&e.path, size))
        .collect()
}

pub fn fit_manifest(cfg: &TrainConfig, manifest: &DatasetManifest, opts: &FitOptions) -> Result<FitOutcome> {
    let train = load_split(manifest, Split::Train, cfg.model.image_size)?;
    fit(cfg, &train, opts)
}

/// Fixed 4×4 grid: eight training images, each followed by its reconstruction.
fn snapshot_grid(state: &TrainState, data: &[ImageTensor], path: &Path) -> Result<()> {
    let pick: Vec<&ImageTensor> = data.iter().take(8).collect();
    let x = batch(&pick)?;
    let rec = unbatch(&state.model.reconstruct(&x, state.cfg.delta)?)?;
    let mut tiles = Vec::with_capacity(16);
    for (a, b) in pick.iter().zip(rec) {
        tiles.push((*a).clone());
        tiles.push(b);
    }
    save_grid(&tiles, 4, path)
}

/// Train for `cfg.total_steps` steps over `data` (or resume and finish).
pub fn fit(cfg: &TrainConfig, data: &[ImageTensor], opts: &FitOptions) -> Result<FitOutcome> {
    if data.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    if let Some(bad) = data.iter().find(|i| i.size() != cfg.model.image_size) {
        return Err(Error::Resolution(format!(
            "training image is {} pixels, model expects {}",
            bad.size(),
            cfg.model.image_size
        )));
    }
    let pe = cfg.perceptual_extractor()?;
    let mut state = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let want = cfg.digest()?;
            if ck.config_digest != want {
                return Err(Error::Checkpoint(format!(
                    "{} was written under config {}, current config is {want}",
                    path.display(),
                    ck.config_digest
                )));
            }
            ck.into_state()?
        }
        None => TrainState::new(cfg)?,
    };
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            let f = if opts.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(&p)
            } else {
                File::create(&p)
            };
            Some(f.map_err(|e| Error::io(&p, e))?)
        }
        None => None,
    };
    let mut order = BatchOrder::new(cfg.seed, data.len(), cfg.batch_size);
    let every = cfg.snapshot_interval();
    let end = opts.stop_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut log = Vec::new();
    while state.step < end {
        let idx = order.indices(state.step);
        let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &data[i]).collect();
        let x = batch(&imgs)?;
        let lr = cosine_lr(state.step, cfg.total_steps, cfg.lr0, cfg.lr_min);
        let r = train_step(&mut state, &x, &pe)?;
        let line = LogLine {
            step: state.step - 1,
            lr,
            total: r.total,
            reg: r.reg,
            lpips: r.lpips,
            l2: r.l2,
            adv: r.adv,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        if state.step % 50 == 0 {
            log::info!("step {} total {:.5} l2 {:.5} lpips {:.5}", line.step, r.total, r.l2, r.lpips);
        }
        log.push(line);
        if let Some(dir) = &opts.out_dir {
            if state.step % every == 0 {
                snapshot_grid(&state, data, &dir.join("snapshots").join(format!("step_{:06}.png", state.step)))?;
                Checkpoint::from_state(&state, None)?.save(&dir.join("checkpoint.bin"))?;
            }
        }
    }
    let prior = if state.step >= cfg.total_steps && !opts.skip_prior {
        let code = state.model.encode_images(data, cfg.delta, 16)?;
        Some(LatentPrior::fit(&code)?)
    } else {
        None
    };
    let outcome = FitOutcome { state, log, prior };
    if let Some(dir) = &opts.out_dir {
        outcome.checkpoint()?.save(&dir.join("checkpoint.bin"))?;
    }
    Ok(outcome)
}

/// Encoder latents for a set of images, as used to fit a prior.
pub fn encode_all(model: &Model, images: &[ImageTensor], delta: usize) -> Result<LatentCode> {
    model.encode_images(images, delta, 16)
}
