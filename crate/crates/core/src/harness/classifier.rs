//! Small CNN classifier used to measure the value of synthetic training data.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Activation, Tape};
use crate::error::{Error, Result};
use crate::imaging::{batch, load_image, DatasetManifest, ImageTensor, Split};
use crate::nn::{Adam, Conv2d, ConvSpec, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::util::rng_for;

/// Architectures that need pretrained weights or far more compute than a CPU desk run.
const UNBUILT_PROFILES: [&str; 3] = ["densenet121", "resnet50", "vgg16"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub name: String,
    /// Output channels of the four conv blocks.
    pub widths: [usize; 4],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub input_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self::cnn4()
    }
}

impl ClassifierConfig {
    /// Four conv blocks, about 100k parameters.
    pub fn cnn4() -> Self {
        ClassifierConfig {
            name: "cnn4".into(),
            widths: [16, 32, 64, 128],
            epochs: 12,
            batch_size: 16,
            lr: 1e-3,
            input_size: 64,
        }
    }

    /// Same topology at half width.
    pub fn cnn4_narrow() -> Self {
        ClassifierConfig {
            name: "cnn4-narrow".into(),
            widths: [8, 16, 32, 64],
            ..Self::cnn4()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if UNBUILT_PROFILES.contains(&self.name.to_ascii_lowercase().as_str()) {
            return Err(Error::Config(format!(
                "classifier profile '{}' is not built in; use a cnn4 variant",
                self.name
            )));
        }
        if self.widths.contains(&0) || self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!("invalid classifier config '{}'", self.name)));
        }
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return Err(Error::Config("classifier input size must be a multiple of 16".into()));
        }
        Ok(())
    }
}

/// Conv3×3 → LeakyReLU → 2×2 average pool, four times; global pool; linear head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
    pub num_classes: usize,
}

impl Classifier {
    pub fn new(cfg: &ClassifierConfig, num_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "classifier.init");
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &w) in cfg.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &mut rng, &format!("block{i}"), ConvSpec::new(cin, w, 3)));
            cin = w;
        }
        let head = Linear::new(&mut store, &mut rng, "head", cin, num_classes, 1.0, 0.0);
        Ok(Classifier {
            store,
            convs,
            head,
            num_classes,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: crate::autograd::Var) -> Result<crate::autograd::Var> {
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(tape, h)?;
            let y = tape.act(y, Activation::LeakyRelu);
            h = tape.avg_pool2(y)?;
        }
        let g = tape.global_avg_pool(h)?;
        let n = tape.shape(g)[0];
        let c = tape.shape(g)[1];
        let g = tape.reshape(g, &[n, c])?;
        self.head.forward(tape, g)
    }

    pub fn predict(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut tape = Tape::frozen(&self.store);
            let x = tape.constant(batch(&chunk.iter().collect::<Vec<_>>())?);
            let logits = self.forward(&mut tape, x)?;
            let v = tape.value(logits);
            for row in v.data().chunks(self.num_classes) {
                let mut best = 0;
                for (k, &z) in row.iter().enumerate() {
                    if z > row[best] {
                        best = k;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

/// Outcome of one classifier training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRun {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// SHA-256 over the sequence of real-sample indices visited during training.
    pub real_order_digest: String,
    pub steps: usize,
}

/// Visit order for one epoch: a seeded permutation of the real samples with
/// the synthetic ones spread evenly through it. The real subsequence depends
/// only on `(seed, epoch)`, so adding synthetic data leaves it untouched.
fn epoch_order(seed: u64, epoch: usize, n_real: usize, n_synth: usize) -> Vec<Sample> {
    let mut real: Vec<usize> = (0..n_real).collect();
    real.shuffle(&mut rng_for(seed, &format!("classifier.real{epoch}")));
    let mut synth: Vec<usize> = (0..n_synth).collect();
    synth.shuffle(&mut rng_for(seed, &format!("classifier.synth{epoch}")));
    let mut out = Vec::with_capacity(n_real + n_synth);
    let mut placed = 0;
    for (i, &r) in real.iter().enumerate() {
        out.push(Sample::Real(r));
        let due = (i + 1) * n_synth / n_real.max(1);
        while placed < due {
            out.push(Sample::Synth(synth[placed]));
            placed += 1;
        }
    }
    out.extend(synth[placed..].iter().map(|&s| Sample::Synth(s)));
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Sample {
    Real(usize),
    Synth(usize),
}

fn check_labels(labels: &[usize]) -> Result<usize> {
    let k = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut seen = vec![false; k];
    for &l in labels {
        seen[l] = true;
    }
    if seen.iter().filter(|s| **s).count() < 2 {
        return Err(Error::Usage("classification needs at least two classes in the training split".into()));
    }
    Ok(k)
}

/// Train on real (plus optional synthetic) labelled images and score on the test set.
pub fn train_classifier_mixed(
    real: &[(ImageTensor, usize)],
    synth: &[(ImageTensor, usize)],
    test: &[(ImageTensor, usize)],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierRun> {
    fit_classifier(real, synth, test, cfg, seed).map(|(_, run)| run)
}

/// As [`train_classifier_mixed`], also returning the trained network.
pub fn fit_classifier(
    real: &[(ImageTensor, usize)],
    synth: &[(ImageTensor, usize)],
    test: &[(ImageTensor, usize)],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(Classifier, ClassifierRun)> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::Usage("classification test split is empty".into()));
    }
    let labels: Vec<usize> = real.iter().chain(synth).map(|(_, l)| *l).collect();
    let k = check_labels(&labels)?.max(test.iter().map(|(_, l)| l + 1).max().unwrap_or(0));
    for (img, _) in real.iter().chain(synth).chain(test) {
        if img.size() != cfg.input_size {
            return Err(Error::Resolution(format!(
                "classifier expects {} pixels, got {}",
                cfg.input_size,
                img.size()
            )));
        }
    }
    let mut model = Classifier::new(cfg, k, seed)?;
    let mut adam = Adam::new(0.9);
    let mut hasher = Sha256::new();
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(seed, epoch, real.len(), synth.len());
        for group in order.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(group.len());
            let mut ys = Vec::with_capacity(group.len());
            for s in group {
                let (img, y) = match *s {
                    Sample::Real(i) => {
                        hasher.update((i as u64).to_le_bytes());
                        &real[i]
                    }
                    Sample::Synth(i) => &synth[i],
                };
                imgs.push(img);
                ys.push(*y);
            }
            let grads = {
                let mut tape = Tape::new(&model.store);
                let x = tape.constant(batch(&imgs)?);
                let logits = model.forward(&mut tape, x)?;
                let loss = tape.cross_entropy(logits, &ys)?;
                let l = tape.scalar(loss);
                if !l.is_finite() {
                    return Err(Error::Numeric(format!("classifier loss diverged at step {steps}")));
                }
                tape.backward(loss)?.into_params()
            };
            adam.step(&mut model.store, &grads, cfg.lr);
            steps += 1;
        }
    }
    let test_imgs: Vec<ImageTensor> = test.iter().map(|(i, _)| i.clone()).collect();
    let predictions = model.predict(&test_imgs)?;
    let correct = predictions.iter().zip(test).filter(|(p, (_, y))| *p == y).count();
    let run = ClassifierRun {
        accuracy: correct as f64 / test.len() as f64,
        predictions,
        real_order_digest: format!("{:x}", hasher.finalize()),
        steps,
    };
    Ok((model, run))
}

pub fn train_classifier_on(
    train: &[(ImageTensor, usize)],
    test: &[(ImageTensor, usize)],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierRun> {
    train_classifier_mixed(train, &[], test, cfg, seed)
}

fn labelled_split(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Vec<(ImageTensor, usize)>> {
    manifest
        .split(split)
        .map(|e| {
            if e.label < 0 {
                return Err(Error::Usage(format!("{} has no class label", e.path.display())));
            }
            Ok((load_image(&e.path, size)?, e.label as usize))
        })
        .collect()
}

/// Train on the manifest's train split and report top-1 accuracy on its test split.
pub fn train_classifier(manifest: &DatasetManifest, cfg: &ClassifierConfig, seed: u64) -> Result<ClassifierRun> {
    let train = labelled_split(manifest, Split::Train, cfg.input_size)?;
    let test = labelled_split(manifest, Split::Test, cfg.input_size)?;
    train_classifier_on(&train, &test, cfg, seed)
}

/// Accuracy of fixed predictions against `rounds` random relabellings of the
/// test set: the no-association null. Returns `(mean, population std)`.
pub fn permutation_null(predictions: &[usize], labels: &[usize], rounds: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng_for(seed, "classifier.permutation");
    let mut perm = labels.to_vec();
    let accs: Vec<f64> = (0..rounds)
        .map(|_| {
            perm.shuffle(&mut rng);
            predictions.iter().zip(&perm).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / rounds as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / rounds as f64;
    (mean, var.sqrt())
}

/// Balanced lesion / no-lesion toy images: scans seeds upward from
/// `first_seed` until each class has `per_class` members. Label 1 = lesions present.
pub fn toy_lesion_set(first_seed: u64, per_class: usize, size: usize) -> Result<Vec<(ImageTensor, usize)>> {
    let mut counts = [0usize; 2];
    let mut out = Vec::with_capacity(2 * per_class);
    let mut seed = first_seed;
    while counts[0] < per_class || counts[1] < per_class {
        let (img, p) = crate::imaging::synthesize_toy_fundus(seed, size)?;
        let y = p.has_lesions() as usize;
        if counts[y] < per_class {
            counts[y] += 1;
            out.push((img, y));
        }
        seed += 1;
    }
    Ok(out)
}

/// Image tensor batch and labels split apart.
pub fn unzip_labelled(items: &[(ImageTensor, usize)]) -> (Vec<ImageTensor>, Vec<usize>) {
    items.iter().cloned().unzip()
}

/// Channel-wise mean of a set of images, handy for sanity checks on synthetic sets.
pub fn mean_image(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Argument("no images".into()))?;
    let mut acc = Tensor::zeros(first.tensor().shape());
    for i in images {
        acc.add_assign(i.tensor());
    }
    Ok(acc.map(|v| v / images.len() as f32))
}
