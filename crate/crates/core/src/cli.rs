//! Command-line front end. Every subcommand takes `--config`, `--seed` and
//! `--out`, writes a JSON report under `--out` and prints a table to stdout.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime failure, 3 numeric divergence.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{run_ablation, run_augmentation_experiment, AblationSpec, AugmentationSpec};
use crate::imaging::manifest::{is_image, sorted_dir};
use crate::imaging::{
    batch, build_manifest, load_image, save_grid, save_image, synthesize_toy_fundus, unbatch, DatasetManifest,
    ImageTensor, Layout, ManifestEntry, Split,
};
use crate::metrics::{evaluate_dirs, EvalConfig, FeatureExtractor, Pairing};
use crate::model::sample_novel;
use crate::training::{fit, load_split, refine_batch, Checkpoint, FitOptions, RefineOptions, TrainConfig};
use crate::util::digest_json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Argument(_) | Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_RUNTIME,
    }
}

/// One JSON document configuring every subcommand. All fields are optional;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub refine: RefineOptions,
    pub ablation: AblationSpec,
    pub augmentation: AugmentationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            refine: RefineOptions::default(),
            ablation: AblationSpec::default(),
            augmentation: AugmentationSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parse a partial document. Keys present override the desk defaults at any
    /// depth, so `{"train": {"batch_size": 4}}` keeps the 64-pixel model.
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let user: serde_json::Value = serde_json::from_str(text)?;
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, user);
        serde_json::from_value(base)
    }

    pub fn digest(&self) -> Result<String> {
        digest_json(self)
    }
}

/// Overlay `top` onto `base`; objects merge recursively, anything else replaces.
fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
    use serde_json::Value;
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Parser, Debug)]
#[command(name = "fundus-synth", version, about = "Fundus image synthesis: training, sampling, inversion and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (JSON); built-in 64-pixel defaults when absent
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed; overrides the seed in the configuration
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural toy corpus and write manifest.jsonl (label 1 = lesions)
    ToyData {
        #[command(flatten)]
        common: Common,
        /// Number of images
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Image edge in pixels (32, 64, 128 or 256)
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train encoder and generator; writes checkpoint.bin, train_log.jsonl and snapshots/
    Train {
        #[command(flatten)]
        common: Common,
        /// manifest.jsonl (train split is used) or a directory of images
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Override the configured number of steps
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from this checkpoint (its config digest must match)
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Stop after this many steps, leaving a resumable checkpoint
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Sample novel images from a checkpoint's latent prior
    Generate {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint with a fitted latent prior
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Number of images
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Truncation toward the mean latent, in [0, 1]
        #[arg(long, default_value_t = 0.7)]
        psi: f32,
    },
    /// Refine latents per image; writes input / encoder / refined triptychs
    Invert {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Image files or directories of images
        #[arg(long = "image", value_name = "PATH", required = true, num_args = 1..)]
        images: Vec<PathBuf>,
        /// Override the configured number of refinement steps
        #[arg(long)]
        steps: Option<usize>,
    },
    /// FID / KID between two image directories, SSIM when paired
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory of real images
        #[arg(long, value_name = "DIR")]
        real: PathBuf,
        /// Directory of generated images
        #[arg(long, value_name = "DIR")]
        gen: PathBuf,
        /// none, identity (same file names) or a JSON Lines file of {gen, real} pairs
        #[arg(long, default_value = "none")]
        pairs: String,
        /// Feature extractor weights (JSON); the fixed test profile when absent
        #[arg(long, value_name = "PATH")]
        extractor: Option<PathBuf>,
    },
    /// Loss ablation on the toy corpus: L2, L2+LPIPS, full
    Ablation {
        #[command(flatten)]
        common: Common,
    },
    /// Classifier accuracy with and without generated training images
    AugmentExperiment {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint with a fitted latent prior
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.ablation.train.seed = seed;
        let n = cfg.ablation.seeds.len() as u64;
        cfg.ablation.seeds = (seed..seed + n).collect();
        let n = cfg.augmentation.seeds.len() as u64;
        cfg.augmentation.seeds = (seed..seed + n).collect();
    }
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::ToyData { common, count, size } => toy_data(&common, count, size),
        Command::Train {
            common,
            data,
            steps,
            resume,
            stop_after,
        } => train(&common, &data, steps, resume, stop_after),
        Command::Generate {
            common,
            checkpoint,
            count,
            psi,
        } => generate(&common, &checkpoint, count, psi),
        Command::Invert {
            common,
            checkpoint,
            images,
            steps,
        } => invert(&common, &checkpoint, &images, steps),
        Command::Evaluate {
            common,
            real,
            gen,
            pairs,
            extractor,
        } => evaluate(&common, &real, &gen, &pairs, extractor.as_deref()),
        Command::Ablation { common } => ablation(&common),
        Command::AugmentExperiment { common, checkpoint } => augment(&common, &checkpoint),
    }
}

fn toy_data(common: &Common, count: usize, size: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::Usage("--count must be positive".into()));
    }
    let seed = common.seed.unwrap_or(0);
    let dir = &common.out;
    create_out(dir)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let (img, params) = synthesize_toy_fundus(seed + i, size)?;
        let name = format!("toy_{:06}.png", seed + i);
        let path = dir.join(&name);
        save_image(&img, &path)?;
        entries.push(ManifestEntry {
            path,
            label: params.has_lesions() as i64,
            split: crate::imaging::manifest::hash_split(Path::new(&name)),
        });
    }
    let manifest = DatasetManifest {
        entries,
        class_names: vec!["healthy".into(), "lesion".into()],
    };
    manifest.write_jsonl(&dir.join("manifest.jsonl"))?;
    let lesions = manifest.entries.iter().filter(|e| e.label == 1).count();
    let train = manifest.split(Split::Train).count();
    println!("wrote {count} images ({lesions} with lesions, {train} in the train split) to {}", dir.display());
    Ok(())
}

/// Training images from a manifest file or an image directory.
fn load_training_images(data: &Path, size: usize) -> Result<Vec<ImageTensor>> {
    if data.is_dir() {
        let manifest = build_manifest(data, Layout::Flat)?;
        manifest.entries.iter().map(|e| load_image(&e.path, size)).collect()
    } else {
        load_split(&DatasetManifest::read_jsonl(data)?, Split::Train, size)
    }
}

fn train(common: &Common, data: &Path, steps: Option<u64>, resume: Option<PathBuf>, stop_after: Option<u64>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.train.total_steps = s;
    }
    cfg.train.validate()?;
    let images = load_training_images(data, cfg.train.model.image_size)?;
    create_out(&common.out)?;
    write_json(&common.out.join("run_config.json"), &cfg)?;
    let opts = FitOptions {
        out_dir: Some(common.out.clone()),
        resume,
        stop_after,
        skip_prior: false,
    };
    let outcome = fit(&cfg.train, &images, &opts)?;
    let last = outcome.log.last();
    println!("config digest   {}", cfg.train.digest()?);
    println!("training images {}", images.len());
    println!("steps           {} / {}", outcome.state.step, cfg.train.total_steps);
    if let Some(l) = last {
        println!(
            "final loss      total {:.5}  l2 {:.5}  lpips {:.5}  reg {:.5}",
            l.total, l.l2, l.lpips, l.reg
        );
    }
    println!("prior fitted    {}", outcome.prior.is_some());
    println!("checkpoint      {}", common.out.join("checkpoint.bin").display());
    Ok(())
}

#[derive(Serialize)]
struct GenerateReport {
    checkpoint_digest: String,
    count: usize,
    seed: u64,
    psi: f32,
    files: Vec<PathBuf>,
}

fn generate(common: &Common, checkpoint: &Path, count: usize, psi: f32) -> Result<()> {
    let _ = load_config(common)?;
    if count == 0 {
        return Err(Error::Usage("--count must be positive".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let prior = ck.prior.as_ref().ok_or_else(|| {
        Error::Checkpoint(format!(
            "{} has no latent prior; train to completion before sampling",
            checkpoint.display()
        ))
    })?;
    let model = ck.model()?;
    let seed = common.seed.unwrap_or(0);
    let images = sample_novel(&model, prior, count, seed, psi)?;
    create_out(&common.out)?;
    let mut files = Vec::with_capacity(count);
    for (i, img) in images.iter().enumerate() {
        let p = common.out.join(format!("sample_{i:05}.png"));
        save_image(img, &p)?;
        files.push(p);
    }
    write_json(
        &common.out.join("generate.json"),
        &GenerateReport {
            checkpoint_digest: ck.config_digest.clone(),
            count,
            seed,
            psi,
            files,
        },
    )?;
    println!("wrote {count} samples at {} px (psi {psi}, seed {seed}) to {}", model.cfg.image_size, common.out.display());
    Ok(())
}

fn expand_images(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            out.extend(sorted_dir(p)?.into_iter().filter(|f| is_image(f)));
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("no images to invert".into()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct InvertRecord {
    image: PathBuf,
    triptych: PathBuf,
    encoder_lpips: f64,
    refined_lpips: f64,
    best_step: usize,
    diverged: bool,
    trace: Vec<(usize, f64)>,
}

fn invert(common: &Common, checkpoint: &Path, images: &[PathBuf], steps: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.refine.steps = s;
    }
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let pe = ck.config.perceptual_extractor()?;
    let delta = ck.config.delta;
    let files = expand_images(images)?;
    create_out(&common.out)?;
    let mut records = Vec::with_capacity(files.len());
    for chunk in files.chunks(8) {
        let imgs = chunk
            .iter()
            .map(|p| load_image(p, model.cfg.image_size))
            .collect::<Result<Vec<_>>>()?;
        let x = batch(&imgs.iter().collect::<Vec<_>>())?;
        let encoded = unbatch(&model.reconstruct(&x, delta)?)?;
        let results = refine_batch(&model, delta, &imgs, &pe, &cfg.refine)?;
        for (((path, img), enc), r) in chunk.iter().zip(&imgs).zip(encoded).zip(results) {
            let refined = unbatch(&model.synthesize(&r.code)?)?.remove(0);
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let trip = common.out.join(format!("invert_{stem}.png"));
            save_grid(&[img.clone(), enc, refined], 3, &trip)?;
            records.push(InvertRecord {
                image: path.clone(),
                triptych: trip,
                encoder_lpips: r.initial(),
                refined_lpips: r.best(),
                best_step: r.best_step,
                diverged: r.diverged,
                trace: r.trace,
            });
        }
    }
    write_json(&common.out.join("invert.json"), &records)?;
    println!("{:<32} {:>12} {:>12} {:>6}", "image", "encoder", "refined", "best");
    for r in &records {
        let name = r.image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        println!("{name:<32} {:>12.5} {:>12.5} {:>6}", r.encoder_lpips, r.refined_lpips, r.best_step);
    }
    Ok(())
}

fn evaluate(common: &Common, real: &Path, gen: &Path, pairs: &str, extractor: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let mut eval = cfg.eval.clone();
    if let Some(seed) = common.seed {
        eval.kid.seed = seed;
    }
    eval.pairing = match pairs {
        "none" => Pairing::None,
        "identity" => Pairing::Identity,
        path => Pairing::File(PathBuf::from(path)),
    };
    let fx = match extractor {
        Some(p) => FeatureExtractor::load(p, eval.image_size)?,
        None => FeatureExtractor::test_profile(),
    };
    let report = evaluate_dirs(real, gen, &eval, &fx)?;
    create_out(&common.out)?;
    write_json(&common.out.join("metrics.json"), &report)?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
    println!("{:<12} {:>14}", "metric", "value");
    println!("{:<12} {:>14}", "ssim_mean", opt(report.ssim_mean));
    println!("{:<12} {:>14}", "ssim_std", opt(report.ssim_std));
    println!("{:<12} {:>14.6}", "fid", report.fid);
    println!("{:<12} {:>14.6}", "kid_mean", report.kid_mean);
    println!("{:<12} {:>14.6}", "kid_std", report.kid_std);
    println!("{:<12} {:>14}", "n_real", report.n_real);
    println!("{:<12} {:>14}", "n_gen", report.n_gen);
    println!("extractor {}", report.extractor_id);
    Ok(())
}

fn ablation(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let report = run_ablation(&cfg.ablation)?;
    create_out(&common.out)?;
    write_json(&common.out.join("ablation.json"), &report)?;
    print!("{}", report.table());
    println!(
        "ordering clears the null band in {} of {} seeds",
        report.supporting_seeds(),
        report.seeds.len()
    );
    Ok(())
}

fn augment(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let ck = Checkpoint::load(checkpoint)?;
    let report = run_augmentation_experiment(&cfg.augmentation, &ck)?;
    create_out(&common.out)?;
    write_json(&common.out.join("augmentation.json"), &report)?;
    print!("{}", report.table());
    Ok(())
}
