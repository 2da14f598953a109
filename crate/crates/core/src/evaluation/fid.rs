//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this (relative to the largest) are treated as a
/// numerical failure instead of rounding noise.
const NEG_EIG_TOL: f64 = 1e-6;
const EIGEN_EPS: f64 = 1e-14;
const EIGEN_MAX_ITER: usize = 10_000;

/// Mean and unbiased covariance of the rows of `features` (N×k).
pub fn moments(features: &[Vec<f32>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    let k = features.first().map_or(0, Vec::len);
    if n < 2 || k == 0 {
        return Err(Error::Data(format!("need at least 2 feature rows of dimension ≥ 1, got {n}×{k}")));
    }
    if features.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("feature rows have different lengths".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("features contain non-finite values".into()));
    }
    if n < k + 1 {
        log::warn!("{n} samples for {k}-dimensional features: covariance is rank deficient");
    }
    let x = DMatrix::from_fn(n, k, |i, j| features[i][j] as f64);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, k, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

fn eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, EIGEN_EPS, EIGEN_MAX_ITER).ok_or_else(|| {
        let sv = m.singular_values();
        let cond = sv.max() / sv.min();
        Error::Numerical(format!("eigendecomposition of {what} did not converge (condition number {cond:.3e})"))
    })
}

/// Eigenvalues with rounding-level negatives clamped to zero.
fn clamp_eigenvalues(vals: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(v) = vals.iter().find(|&&v| v < -NEG_EIG_TOL * scale) {
        return Err(Error::Numerical(format!("{what} is not positive semi-definite (eigenvalue {v:.3e})")));
    }
    Ok(vals.map(|v| v.max(0.0)))
}

/// Symmetric PSD square root.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen(m, "covariance")?;
    let vals = clamp_eigenvalues(&e.eigenvalues, "covariance")?.map(f64::sqrt);
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose())
}

/// `(A B)^{1/2}` for symmetric PSD `A`, `B`, via the symmetric matrix
/// `A^{1/2} B A^{1/2}`: the result is `A^{1/2} (A^{1/2} B A^{1/2})^{1/2}
/// A^{-1/2}`. Needs `A` invertible.
pub fn sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sa = sqrt_psd(a)?;
    let inner = sqrt_psd(&(&sa * b * &sa))?;
    let inv = sa
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("matrix square root is singular".into()))?;
    Ok(sa * inner * inv)
}

/// `Tr((A B)^{1/2})`, which equals the trace of the square root of the
/// symmetric PSD matrix `A^{1/2} B A^{1/2}` and needs no inverse.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let sa = sqrt_psd(a)?;
    let e = eigen(&(&sa * b * &sa), "covariance product")?;
    Ok(clamp_eigenvalues(&e.eigenvalues, "covariance product")?.map(f64::sqrt).sum())
}

/// Fréchet distance between Gaussians `N(mu1, cov1)` and `N(mu2, cov2)`.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    if mu1.len() != mu2.len() {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", mu1.len(), mu2.len())));
    }
    let mean_term = (mu1 - mu2).norm_squared();
    let cross = trace_sqrt_product(cov1, cov2)?;
    Ok((mean_term + cov1.trace() + cov2.trace() - 2.0 * cross).max(0.0))
}

/// FID between two feature sets (rows are samples).
pub fn fid(features_real: &[Vec<f32>], features_fake: &[Vec<f32>]) -> Result<f64> {
    let (mu_r, cov_r) = moments(features_real)?;
    let (mu_f, cov_f) = moments(features_fake)?;
    frechet_distance(&mu_r, &cov_r, &mu_f, &cov_f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(n: usize, k: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = random_features(50, 6, 1);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn one_dimensional_exact_moments() {
        // {-1, 1} has mean 0 and unbiased variance 2; scale to variance 1.
        let s = 0.5f32.sqrt();
        let a = vec![vec![-s], vec![s]];
        let b = vec![vec![1.0 - s], vec![1.0 + s]];
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric() {
        let a = random_features(40, 4, 2);
        let b: Vec<Vec<f32>> = random_features(60, 4, 3)
            .into_iter()
            .map(|r| r.iter().map(|v| 2.0 * v + 0.3).collect())
            .collect();
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn non_finite_is_fatal() {
        let mut a = random_features(10, 2, 4);
        a[3][1] = f32::NAN;
        assert!(matches!(fid(&a, &a), Err(Error::Numerical(_))));
    }

    fn random_spd(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(k, k) * 0.1
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sqrt_product_squares_back(seed in any::<u64>(), k in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_spd(k, &mut rng), random_spd(k, &mut rng));
            let r = sqrt_product(&a, &b).unwrap();
            let p = &a * &b;
            prop_assert!((&r * &r - &p).norm() / p.norm() < 1e-6);
        }
    }
}
