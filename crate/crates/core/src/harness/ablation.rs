//! Loss ablation: train with L2 only, with L2 + perceptual, and with every
//! term, then compare FID/KID of held-out reconstructions.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::toy_corpus;
use crate::error::{Error, Result};
use crate::imaging::{batch, unbatch, ImageTensor};
use crate::losses::LossWeights;
use crate::metrics::{extract_features, fid, kid, FeatureExtractor, FeatureMatrix, KidParams};
use crate::training::{fit, FitOptions, TrainConfig};
use crate::util::{digest_json, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    V1,
    V2,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::V1, Variant::V2, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::Full => "full",
        }
    }

    /// Switch terms off relative to `base`; active terms keep their weights.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        match self {
            Variant::V1 => LossWeights { reg: 0.0, lpips: 0.0, ..*base },
            Variant::V2 => LossWeights { reg: 0.0, ..*base },
            Variant::Full => *base,
        }
    }

    pub fn terms(self) -> &'static str {
        match self {
            Variant::V1 => "L2",
            Variant::V2 => "L2+LPIPS",
            Variant::Full => "L2+LPIPS+reg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    /// Shared training recipe; its loss weights define the full variant.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub corpus_seed: u64,
    pub train_count: usize,
    pub eval_count: usize,
    /// Half-split resamples of the L2-only run used to size the noise band.
    pub null_repeats: usize,
    pub kid: KidParams,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            train: TrainConfig {
                total_steps: 300,
                ..TrainConfig::desk()
            },
            seeds: vec![0, 1, 2],
            corpus_seed: 10_000,
            train_count: 200,
            eval_count: 200,
            null_repeats: 5,
            kid: KidParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub fid: Option<f64>,
    pub kid_mean: Option<f64>,
    pub kid_std: Option<f64>,
    pub final_loss: Option<f64>,
    /// Why the run produced no numbers.
    pub failed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Largest FID gap between disjoint halves of the L2-only evaluation.
    pub null_band: Option<f64>,
    /// FID(v1) > FID(v2) > FID(full).
    pub ordered: bool,
    /// Both gaps of the ordering exceed the null band.
    pub separated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub spec_digest: String,
    pub extractor_id: String,
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<SeedSummary>,
}

impl AblationReport {
    /// Seeds where the ordering holds and clears the null band.
    pub fn supporting_seeds(&self) -> usize {
        self.seeds.iter().filter(|s| s.ordered && s.separated).count()
    }

    pub fn row(&self, variant: Variant, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// Aligned text table: one row per variant, FID and KID averaged over seeds.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:<14} {:>10} {:>12} {:>8}", "variant", "terms", "FID", "KID", "failed");
        for v in Variant::ALL {
            let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v).collect();
            let ok: Vec<&AblationRow> = rows.iter().copied().filter(|r| r.failed.is_none()).collect();
            let mean = |f: &dyn Fn(&AblationRow) -> Option<f64>| {
                let vals: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            let fmt = |x: Option<f64>, p: usize| x.map(|x| format!("{x:.p$}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<8} {:<14} {:>10} {:>12} {:>8}",
                v.name(),
                v.terms(),
                fmt(mean(&|r| r.fid), 3),
                fmt(mean(&|r| r.kid_mean), 5),
                rows.len() - ok.len()
            );
        }
        for sd in &self.seeds {
            let fids: Vec<String> = Variant::ALL
                .iter()
                .map(|v| {
                    self.row(*v, sd.seed)
                        .and_then(|r| r.fid)
                        .map(|f| format!("{f:.3}"))
                        .unwrap_or_else(|| "failed".into())
                })
                .collect();
            let _ = writeln!(
                s,
                "seed {}: FID v1/v2/full = {}; null band {}; ordered {}; clears band {}",
                sd.seed,
                fids.join(" / "),
                sd.null_band.map(|b| format!("{b:.3}")).unwrap_or_else(|| "-".into()),
                sd.ordered,
                sd.separated
            );
        }
        s
    }
}

/// Reconstructions of `images` in chunks.
fn reconstruct_all(model: &crate::model::Model, images: &[ImageTensor], delta: usize) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let x = batch(&chunk.iter().collect::<Vec<_>>())?;
        out.extend(unbatch(&model.reconstruct(&x, delta)?)?);
    }
    Ok(out)
}

/// Largest FID difference between the two halves of random splits.
fn null_band(real: &FeatureMatrix, gen: &FeatureMatrix, repeats: usize, seed: u64) -> Result<f64> {
    let n = real.rows();
    let mut band: f64 = 0.0;
    for r in 0..repeats {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(seed, &format!("ablation.null{r}")));
        let (a, b) = idx.split_at(n / 2);
        let fa = fid(&real.select(a), &gen.select(a))?;
        let fb = fid(&real.select(b), &gen.select(b))?;
        band = band.max((fa - fb).abs());
    }
    Ok(band)
}

/// Train every variant under every seed on the same toy split and score held-out reconstructions.
pub fn run_ablation(spec: &AblationSpec) -> Result<AblationReport> {
    spec.train.validate()?;
    if spec.seeds.is_empty() || spec.train_count == 0 || spec.eval_count < 4 {
        return Err(Error::Config("ablation needs seeds, training images and at least 4 evaluation images".into()));
    }
    let size = spec.train.model.image_size;
    let train = toy_corpus(spec.corpus_seed, spec.train_count, size)?;
    let eval = toy_corpus(spec.corpus_seed + spec.train_count as u64, spec.eval_count, size)?;
    let fx = FeatureExtractor::test_profile();
    let real = extract_features(&eval, &fx)?;
    let mut kp = spec.kid;
    kp.subset_size = kp.subset_size.min(spec.eval_count);

    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    for &seed in &spec.seeds {
        let mut band = None;
        for v in Variant::ALL {
            let cfg = TrainConfig {
                seed,
                weights: v.weights(&spec.train.weights),
                ..spec.train.clone()
            };
            log::info!("ablation: training {} seed {seed}", v.name());
            let opts = FitOptions {
                skip_prior: true,
                ..FitOptions::default()
            };
            let outcome = match fit(&cfg, &train, &opts) {
                Ok(o) => o,
                Err(Error::Numeric(msg)) => {
                    rows.push(AblationRow {
                        variant: v,
                        seed,
                        fid: None,
                        kid_mean: None,
                        kid_std: None,
                        final_loss: None,
                        failed: Some(msg),
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
            let recon = reconstruct_all(&outcome.state.model, &eval, cfg.delta)?;
            let gen = extract_features(&recon, &fx)?;
            if v == Variant::V1 {
                band = Some(null_band(&real, &gen, spec.null_repeats, seed)?);
            }
            let (km, ks) = kid(&real, &gen, &kp)?;
            rows.push(AblationRow {
                variant: v,
                seed,
                fid: Some(fid(&real, &gen)?),
                kid_mean: Some(km),
                kid_std: Some(ks),
                final_loss: outcome.log.last().map(|l| l.total),
                failed: None,
            });
        }
        let get = |v: Variant| rows.iter().find(|r: &&AblationRow| r.variant == v && r.seed == seed).and_then(|r| r.fid);
        let (ordered, separated) = match (get(Variant::V1), get(Variant::V2), get(Variant::Full)) {
            (Some(a), Some(b), Some(c)) => {
                let ordered = a > b && b > c;
                let sep = band.map(|w| a - b > w && b - c > w).unwrap_or(false);
                (ordered, ordered && sep)
            }
            _ => (false, false),
        };
        seeds.push(SeedSummary {
            seed,
            null_band: band,
            ordered,
            separated,
        });
    }
    Ok(AblationReport {
        spec_digest: digest_json(spec)?,
        extractor_id: fx.id(),
        rows,
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny_spec() -> AblationSpec {
        AblationSpec {
            train: TrainConfig {
                model: ModelConfig::tiny(),
                batch_size: 2,
                total_steps: 2,
                ..TrainConfig::default()
            },
            seeds: vec![0],
            corpus_seed: 5,
            train_count: 4,
            eval_count: 8,
            null_repeats: 2,
            kid: KidParams {
                subset_size: 4,
                num_subsets: 3,
                seed: 0,
            },
        }
    }

    #[test]
    fn variants_differ_only_in_active_terms() {
        let base = LossWeights::default();
        assert_eq!(Variant::V1.weights(&base), LossWeights::new(0.0, 0.0, 1.0));
        assert_eq!(Variant::V2.weights(&base), LossWeights::new(0.0, 0.8, 1.0));
        assert_eq!(Variant::Full.weights(&base), base);
    }

    #[test]
    fn report_is_reproducible_and_complete() {
        let spec = tiny_spec();
        let a = run_ablation(&spec).unwrap();
        let b = run_ablation(&spec).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.table(), b.table());
        assert_eq!(a.rows.len(), 3);
        assert!(a.rows.iter().all(|r| r.failed.is_none() && r.fid.unwrap() >= 0.0));
        assert!(a.seeds[0].null_band.unwrap() >= 0.0);
        assert!(a.table().contains("L2+LPIPS+reg"));
    }

    #[test]
    fn diverging_variant_is_marked_failed() {
        let mut spec = tiny_spec();
        spec.train.lr0 = 1e30;
        spec.train.lr_min = 0.0;
        spec.train.total_steps = 3;
        let r = run_ablation(&spec).unwrap();
        assert!(r.rows.iter().any(|r| r.failed.is_some()));
        assert!(!r.seeds[0].ordered);
        assert!(r.table().contains("failed"));
    }
}
