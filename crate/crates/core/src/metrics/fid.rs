//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Diagonal loading applied when a covariance is numerically singular.
pub const FID_EPS: f64 = 1e-6;

/// Sample mean and unbiased covariance of the rows.
pub fn mean_cov(m: &FeatureMatrix) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (m.rows(), m.dim);
    let x = DMatrix::from_row_slice(n, d, &m.data);
    let mu = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
    let mut centred = x;
    for j in 0..d {
        let mj = mu[j];
        centred.column_mut(j).iter_mut().for_each(|v| *v -= mj);
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    (mu, cov)
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Trace of `(A·B)^½` computed as `Tr((√A·B·√A)^½)`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let sa = sqrt_psd(a);
    let m = &sa * b * &sa;
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

fn near_singular(c: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new((c + c.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    min <= 1e-12 * max.max(1e-300)
}

/// `‖μA − μB‖² + Tr(ΣA + ΣB − 2(ΣA·ΣB)^½)` from already-fitted moments.
pub fn frechet(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = cov_a.nrows();
    let (mut ca, mut cb) = (cov_a.clone(), cov_b.clone());
    if near_singular(&ca) || near_singular(&cb) {
        let eps = DMatrix::identity(d, d) * FID_EPS;
        ca += &eps;
        cb += eps;
    }
    let diff = (mu_a - mu_b).norm_squared();
    let v = diff + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
    if !v.is_finite() {
        return Err(Error::Numeric("FID is not finite after stabilisation".into()));
    }
    Ok(v)
}

pub fn fid(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Argument(format!("feature widths differ: {} vs {}", a.dim, b.dim)));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Argument("FID needs at least two samples per set".into()));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let v = frechet(&ma, &ca, &mb, &cb)?;
    // identical sets can land a rounding step below zero
    Ok(if v.abs() < 1e-9 * (ca.trace() + cb.trace()).max(1.0) { 0.0 } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, mu: &[f64], chol: &DMatrix<f64>, seed: u64) -> FeatureMatrix {
        let d = mu.len();
        let mut rng = rng_for(seed, "fid");
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
            let x = chol * z;
            data.extend((0..d).map(|j| x[j] + mu[j]));
        }
        FeatureMatrix::new(data, d, "gauss").unwrap()
    }

    #[test]
    fn identity_is_zero() {
        let a = gaussian(50, &[0.0; 4], &DMatrix::identity(4, 4), 0);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = gaussian(50_000, &[0.0], &DMatrix::identity(1, 1), 1);
        let b = gaussian(50_000, &[1.0], &DMatrix::identity(1, 1), 2);
        let v = fid(&a, &b).unwrap();
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        /// Non-negative, and translating both sets by the same vector changes nothing.
        #[test]
        fn non_negative_and_translation_invariant(seed in 0u64..10_000, shift in -5.0f64..5.0) {
            let a = gaussian(60, &[0.0, 0.0], &DMatrix::identity(2, 2), seed);
            let b = gaussian(60, &[0.5, -0.2], &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.8]), seed + 1);
            let v = fid(&a, &b).unwrap();
            proptest::prop_assert!(v >= -1e-9);
            let mv = |m: &FeatureMatrix| FeatureMatrix::new(m.data.iter().map(|x| x + shift).collect(), 2, "t").unwrap();
            proptest::prop_assert!((fid(&mv(&a), &mv(&b)).unwrap() - v).abs() < 1e-6 * (1.0 + v));
        }
    }

    #[test]
    fn symmetric_and_rotation_invariant() {
        let a = gaussian(400, &[0.0, 1.0, 0.5], &DMatrix::from_row_slice(3, 3, &[1., 0., 0., 0.5, 1., 0., 0.2, 0.1, 0.7]), 3);
        let b = gaussian(400, &[0.3, 0.0, 0.0], &DMatrix::identity(3, 3), 4);
        let ab = fid(&a, &b).unwrap();
        assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-9);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = DMatrix::from_row_slice(3, 3, &[c, -s, 0., s, c, 0., 0., 0., 1.]);
        let turn = |m: &FeatureMatrix| {
            let x = DMatrix::from_row_slice(m.rows(), 3, &m.data) * rot.transpose();
            let data: Vec<f64> = (0..m.rows()).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| x[(i, j)]).collect();
            FeatureMatrix::new(data, 3, "rot").unwrap()
        };
        assert!((fid(&turn(&a), &turn(&b)).unwrap() - ab).abs() < 1e-4);
    }
}
