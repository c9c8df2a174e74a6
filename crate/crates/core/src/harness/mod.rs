//! Experiment harnesses: the loss ablation and the synthetic-augmentation study.

mod ablation;
mod augment;
pub mod classifier;

pub use ablation::{run_ablation, AblationReport, AblationRow, AblationSpec, SeedSummary, Variant};
pub use augment::{run_augmentation_experiment, AugmentationReport, AugmentationRow, AugmentationSpec, SeedRecord};
pub use classifier::{
    fit_classifier, permutation_null, toy_lesion_set, train_classifier, train_classifier_mixed, train_classifier_on, Classifier,
    ClassifierConfig, ClassifierRun,
};

use crate::error::Result;
use crate::imaging::{synthesize_toy_fundus, ImageTensor};

/// Toy images for seeds `first_seed .. first_seed + count`.
pub fn toy_corpus(first_seed: u64, count: usize, size: usize) -> Result<Vec<ImageTensor>> {
    (0..count as u64)
        .map(|i| synthesize_toy_fundus(first_seed + i, size).map(|(img, _)| img))
        .collect()
}

/// Two-sided exact sign test: probability under a fair coin of a split at
/// least as lopsided as `wins` vs `losses`. Ties are dropped.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    // P(X <= k) for X ~ Binomial(n, 1/2)
    let mut term = 0.5f64.powi(n as i32);
    let mut tail = term;
    for i in 0..k {
        term *= (n - i) as f64 / (i + 1) as f64;
        tail += term;
    }
    (2.0 * tail).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_exact_values() {
        assert_eq!(sign_test(0, 0), 1.0);
        // 5-0: 2 * (1/32)
        assert!((sign_test(5, 0) - 0.0625).abs() < 1e-12);
        // 4-1: 2 * 6/32
        assert!((sign_test(1, 4) - 0.375).abs() < 1e-12);
        assert_eq!(sign_test(3, 3), 1.0);
        // 9-1 of 10: 2 * 11/1024
        assert!((sign_test(9, 1) - 22.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_is_seeded() {
        let a = toy_corpus(3, 2, 32).unwrap();
        assert_eq!(a[1], toy_corpus(4, 1, 32).unwrap()[0]);
    }
}
