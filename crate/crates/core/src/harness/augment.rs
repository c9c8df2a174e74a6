//! Synthetic-augmentation study: classifiers trained on real images versus
//! real plus generated images, paired by seed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::classifier::{fit_classifier, toy_lesion_set, train_classifier_mixed, ClassifierConfig};
use super::sign_test;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::model::sample_novel;
use crate::training::Checkpoint;
use crate::util::digest_json;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    /// Real training images per class (lesion / no lesion).
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub corpus_seed: u64,
    /// Number of generated images appended to the training set.
    pub generated: usize,
    /// Truncation used when sampling the generator.
    pub psi: f32,
    pub classifiers: Vec<ClassifierConfig>,
    pub seeds: Vec<u64>,
    /// Classifier trained once on the real split to label generated images.
    pub labeler: ClassifierConfig,
    pub labeler_seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            per_class_train: 100,
            per_class_test: 50,
            corpus_seed: 50_000,
            generated: 200,
            psi: 0.7,
            classifiers: vec![ClassifierConfig::cnn4(), ClassifierConfig::cnn4_narrow()],
            seeds: vec![0, 1, 2, 3, 4],
            labeler: ClassifierConfig::cnn4(),
            labeler_seed: 1_000,
        }
    }
}

/// One matched pair of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub classifier: String,
    pub seed: u64,
    pub real_accuracy: f64,
    pub augmented_accuracy: f64,
    pub delta: f64,
    pub real_order_digest: String,
    pub augmented_order_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRow {
    pub classifier: String,
    pub real_mean: f64,
    pub augmented_mean: f64,
    pub mean_delta: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Two-sided sign-test p-value over the per-seed deltas.
    pub sign_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub spec_digest: String,
    pub generated: usize,
    pub labeler_accuracy: f64,
    /// Pseudo-label counts of the generated set for the first seed, by class.
    pub pseudo_label_counts: Vec<usize>,
    pub rows: Vec<AugmentationRow>,
    pub per_seed: Vec<SeedRecord>,
}

impl AugmentationReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>10} {:>12} {:>9} {:>7} {:>8}",
            "classifier", "real", "real+gen", "delta", "W/L/T", "sign p"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>10.4} {:>12.4} {:>+9.4} {:>7} {:>8.4}",
                r.classifier,
                r.real_mean,
                r.augmented_mean,
                r.mean_delta,
                format!("{}/{}/{}", r.wins, r.losses, r.ties),
                r.sign_p
            );
        }
        let _ = writeln!(
            s,
            "generated images: {}; labeller accuracy on real test: {:.4}",
            self.generated, self.labeler_accuracy
        );
        s
    }
}

/// Train every classifier on real data and on real + generated data under
/// each seed. Real-data order and initialisation are shared within a pair.
pub fn run_augmentation_experiment(spec: &AugmentationSpec, ck: &Checkpoint) -> Result<AugmentationReport> {
    let prior = ck
        .prior
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no fitted latent prior".into()))?;
    if spec.classifiers.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("augmentation needs at least one classifier and one seed".into()));
    }
    let model = ck.model()?;
    let size = spec.labeler.input_size;
    let real = toy_lesion_set(spec.corpus_seed, spec.per_class_train, size)?;
    let test = toy_lesion_set(spec.corpus_seed + 1_000_000, spec.per_class_test, size)?;

    let (labeler, labeler_run) = fit_classifier(&real, &[], &test, &spec.labeler, spec.labeler_seed)?;

    let mut per_seed = Vec::new();
    let mut pseudo_label_counts = Vec::new();
    for &seed in &spec.seeds {
        let synth: Vec<(ImageTensor, usize)> = if spec.generated == 0 {
            Vec::new()
        } else {
            let imgs = sample_novel(&model, prior, spec.generated, seed, spec.psi)?
                .into_iter()
                .map(|i| i.resized(size))
                .collect::<Result<Vec<_>>>()?;
            let labels = labeler.predict(&imgs)?;
            imgs.into_iter().zip(labels).collect()
        };
        if pseudo_label_counts.is_empty() {
            let mut counts = vec![0; labeler.num_classes];
            for (_, y) in &synth {
                counts[*y] += 1;
            }
            pseudo_label_counts = counts;
        }
        for cfg in &spec.classifiers {
            let a = train_classifier_mixed(&real, &[], &test, cfg, seed)?;
            let b = train_classifier_mixed(&real, &synth, &test, cfg, seed)?;
            if a.real_order_digest != b.real_order_digest {
                return Err(Error::Numeric("paired runs visited real data in different orders".into()));
            }
            per_seed.push(SeedRecord {
                classifier: cfg.name.clone(),
                seed,
                real_accuracy: a.accuracy,
                augmented_accuracy: b.accuracy,
                delta: b.accuracy - a.accuracy,
                real_order_digest: a.real_order_digest,
                augmented_order_digest: b.real_order_digest,
            });
        }
    }
    let rows = spec
        .classifiers
        .iter()
        .map(|cfg| {
            let recs: Vec<&SeedRecord> = per_seed.iter().filter(|r| r.classifier == cfg.name).collect();
            let n = recs.len() as f64;
            let wins = recs.iter().filter(|r| r.delta > 0.0).count();
            let losses = recs.iter().filter(|r| r.delta < 0.0).count();
            AugmentationRow {
                classifier: cfg.name.clone(),
                real_mean: recs.iter().map(|r| r.real_accuracy).sum::<f64>() / n,
                augmented_mean: recs.iter().map(|r| r.augmented_accuracy).sum::<f64>() / n,
                mean_delta: recs.iter().map(|r| r.delta).sum::<f64>() / n,
                wins,
                losses,
                ties: recs.len() - wins - losses,
                sign_p: sign_test(wins, losses),
            }
        })
        .collect();
    Ok(AugmentationReport {
        spec_digest: digest_json(spec)?,
        generated: spec.generated,
        labeler_accuracy: labeler_run.accuracy,
        pseudo_label_counts,
        rows,
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::training::{fit, FitOptions, TrainConfig};

    fn tiny_checkpoint(with_prior: bool) -> Checkpoint {
        let cfg = TrainConfig {
            model: ModelConfig::tiny(),
            batch_size: 4,
            total_steps: 2,
            ..TrainConfig::default()
        };
        let data = super::super::toy_corpus(0, 12, 32).unwrap();
        let opts = FitOptions {
            skip_prior: !with_prior,
            ..FitOptions::default()
        };
        fit(&cfg, &data, &opts).unwrap().checkpoint().unwrap()
    }

    fn tiny_spec(generated: usize) -> AugmentationSpec {
        let small = ClassifierConfig {
            epochs: 1,
            batch_size: 8,
            input_size: 32,
            ..ClassifierConfig::cnn4_narrow()
        };
        AugmentationSpec {
            per_class_train: 6,
            per_class_test: 4,
            corpus_seed: 3,
            generated,
            psi: 0.7,
            classifiers: vec![small.clone()],
            seeds: vec![0, 1],
            labeler: small,
            labeler_seed: 2,
        }
    }

    #[test]
    fn no_generated_images_gives_identical_columns() {
        let ck = tiny_checkpoint(true);
        let r = run_augmentation_experiment(&tiny_spec(0), &ck).unwrap();
        assert_eq!(r.per_seed.len(), 2);
        for rec in &r.per_seed {
            assert_eq!(rec.real_accuracy, rec.augmented_accuracy);
            assert_eq!(rec.real_order_digest, rec.augmented_order_digest);
        }
        let row = &r.rows[0];
        assert_eq!(row.real_mean, row.augmented_mean);
        assert_eq!((row.wins, row.losses, row.ties), (0, 0, 2));
        assert_eq!(row.sign_p, 1.0);
    }

    #[test]
    fn generated_images_keep_real_order_and_are_reproducible() {
        let ck = tiny_checkpoint(true);
        let spec = tiny_spec(5);
        let a = run_augmentation_experiment(&spec, &ck).unwrap();
        assert_eq!(a, run_augmentation_experiment(&spec, &ck).unwrap());
        assert!(a.per_seed.iter().all(|r| r.real_order_digest == r.augmented_order_digest));
        assert_eq!(a.pseudo_label_counts.iter().sum::<usize>(), 5);
        assert!(a.table().contains("cnn4-narrow"));
    }

    #[test]
    fn missing_prior_is_rejected() {
        let ck = tiny_checkpoint(false);
        assert!(matches!(
            run_augmentation_experiment(&tiny_spec(0), &ck),
            Err(Error::Checkpoint(_))
        ));
    }
}
