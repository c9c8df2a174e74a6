//! Unbiased squared MMD with the cubic polynomial kernel over seeded subsets.

use rand::seq::index::sample;

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::util::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KidParams {
    pub subset_size: usize,
    pub num_subsets: usize,
    pub seed: u64,
}

impl Default for KidParams {
    fn default() -> Self {
        KidParams {
            subset_size: 100,
            num_subsets: 50,
            seed: 0,
        }
    }
}

fn kernel(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / a.len() as f64 + 1.0).powi(3)
}

/// Subset indices depend only on `(seed, subset, set size)`, so swapping the
/// two sets swaps their subsets too and the estimate stays symmetric.
fn subset(n: usize, m: usize, seed: u64, k: usize) -> Vec<usize> {
    let mut rng = rng_for(seed, &format!("kid.{k}.{n}"));
    sample(&mut rng, n, m).into_vec()
}

fn mmd2(a: &FeatureMatrix, ia: &[usize], b: &FeatureMatrix, ib: &[usize]) -> f64 {
    let m = ia.len() as f64;
    let within = |x: &FeatureMatrix, idx: &[usize]| {
        let mut s = 0.0;
        for (p, &i) in idx.iter().enumerate() {
            for &j in &idx[p + 1..] {
                s += kernel(x.row(i), x.row(j));
            }
        }
        2.0 * s / (m * (m - 1.0))
    };
    let mut cross = 0.0;
    for &i in ia {
        for &j in ib {
            cross += kernel(a.row(i), b.row(j));
        }
    }
    within(a, ia) + within(b, ib) - 2.0 * cross / (m * m)
}

/// Mean and standard deviation of the per-subset estimates.
pub fn kid(a: &FeatureMatrix, b: &FeatureMatrix, p: &KidParams) -> Result<(f64, f64)> {
    if a.dim != b.dim {
        return Err(Error::Argument(format!("feature widths differ: {} vs {}", a.dim, b.dim)));
    }
    if p.subset_size < 2 || p.subset_size > a.rows() || p.subset_size > b.rows() {
        return Err(Error::Argument(format!(
            "subset size {} must be in [2, min({}, {})]",
            p.subset_size,
            a.rows(),
            b.rows()
        )));
    }
    if p.num_subsets == 0 {
        return Err(Error::Argument("need at least one KID subset".into()));
    }
    let vals: Vec<f64> = (0..p.num_subsets)
        .map(|k| {
            let ia = subset(a.rows(), p.subset_size, p.seed, k);
            let ib = subset(b.rows(), p.subset_size, p.seed, k);
            mmd2(a, &ia, b, &ib)
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn normal(n: usize, d: usize, shift: f64, seed: u64) -> FeatureMatrix {
        let mut rng = rng_for(seed, "kid.test");
        let data = (0..n * d).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); z + shift }).collect::<Vec<f64>>();
        FeatureMatrix::new(data, d, "gauss").unwrap()
    }

    #[test]
    fn null_separation_and_determinism() {
        let all = normal(2000, 16, 0.0, 1);
        let (a, b) = all.split_at(1000);
        let p = KidParams::default();
        let (null, _) = kid(&a, &b, &p).unwrap();
        assert!(null.abs() <= 0.01, "{null}");
        let shifted = FeatureMatrix::new(b.data.iter().map(|v| v + 1.0).collect(), 16, "gauss").unwrap();
        let (sep, _) = kid(&a, &shifted, &p).unwrap();
        assert!(sep > 0.0 && sep > 10.0 * null.abs(), "{sep} vs {null}");
        assert_eq!(kid(&a, &b, &p).unwrap(), kid(&a, &b, &p).unwrap());
    }

    #[test]
    fn symmetric_under_swap() {
        let a = normal(300, 8, 0.0, 2);
        let b = normal(250, 8, 0.3, 3);
        let p = KidParams { subset_size: 50, num_subsets: 10, seed: 4 };
        let ab = kid(&a, &b, &p).unwrap().0;
        let ba = kid(&b, &a, &p).unwrap().0;
        assert!((ab - ba).abs() < 1e-12, "{ab} {ba}");
    }

    #[test]
    fn oversized_subset_is_an_error() {
        let a = normal(10, 4, 0.0, 5);
        assert!(kid(&a, &a, &KidParams::default()).is_err());
    }
}
