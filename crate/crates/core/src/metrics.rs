//! Inception Score and Fréchet distance over image sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::EmbeddingBackbone;
use crate::error::{Result, TryonError};
use tryon_tensor::Array;

pub const DEFAULT_SPLITS: usize = 10;

/// Mean and spread of the per-split scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InceptionScore {
    pub mean: f64,
    pub std: f64,
}

/// Score from class-probability rows split into `n_splits` contiguous
/// chunks (any remainder is left out). `std` is the population deviation.
pub fn inception_score_from_probs(probs: &Array2<f64>, n_splits: usize) -> Result<InceptionScore> {
    let (n, c) = probs.dim();
    if c < 2 {
        return Err(TryonError::InsufficientData(format!("{c} classes")));
    }
    if n_splits == 0 || n < n_splits {
        return Err(TryonError::InsufficientData(format!("{n} images for {n_splits} splits")));
    }
    let per = n / n_splits;
    let scores: Vec<f64> = (0..n_splits)
        .map(|k| {
            let part = probs.slice_axis(Axis(0), (k * per..(k + 1) * per).into());
            let marginal = part.mean_axis(Axis(0)).expect("split is non-empty");
            let kl: f64 = part
                .rows()
                .into_iter()
                .map(|row| row.iter().zip(&marginal).filter(|(&p, _)| p > 0.0).map(|(&p, &q)| p * (p.ln() - q.ln())).sum::<f64>())
                .sum::<f64>()
                / per as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / n_splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_splits as f64;
    Ok(InceptionScore { mean, std: var.sqrt() })
}

/// Inception Score of `[n, 3, H, W]` images under `backbone`'s classifier.
pub fn inception_score(images: &Array, backbone: &dyn EmbeddingBackbone, n_splits: usize) -> Result<InceptionScore> {
    check_images(images)?;
    inception_score_from_probs(&backbone.classify(images), n_splits)
}

/// Mean and covariance of a feature cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of `n x k` features.
pub fn gaussian_stats(features: &Array2<f64>) -> Result<GaussianStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(TryonError::InsufficientData(format!("{n} feature rows; need at least 2")));
    }
    let mean = features.mean_axis(Axis(0)).expect("rows present");
    let centered = features - &mean;
    let mut covariance = centered.t().dot(&centered) / (n - 1) as f64;
    // Exact symmetry despite summation order.
    let sym = (&covariance + &covariance.t()) * 0.5;
    covariance.assign(&sym);
    Ok(GaussianStats { mean, covariance })
}

fn to_matrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
///
/// The cross term uses `Tr((A^½ B A^½)^½)`, which equals `Tr((A B)^½)` for
/// PSD `A`, `B` and stays symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.covariance.dim() != (a.dim(), a.dim()) || b.covariance.dim() != (b.dim(), b.dim()) {
        return Err(TryonError::ShapeMismatch(format!("feature dims {} and {}", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (ca, cb) = (to_matrix(&a.covariance), to_matrix(&b.covariance));
    let root_a = psd_sqrt(ca.clone());
    let inner = &root_a * &cb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let d = mean_term + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn check_images(images: &Array) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(TryonError::ShapeMismatch(format!("expected [n, 3, H, W] images, got {s:?}")));
    }
    if s[0] == 0 {
        return Err(TryonError::InsufficientData("empty image set".into()));
    }
    Ok(())
}

/// Fréchet distance between backbone embeddings of two image sets.
pub fn fid(real: &Array, generated: &Array, backbone: &dyn EmbeddingBackbone) -> Result<f64> {
    check_images(real)?;
    check_images(generated)?;
    let a = gaussian_stats(&backbone.embed(real))?;
    let b = gaussian_stats(&backbone.embed(generated))?;
    frechet_distance(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn two_point_stats() {
        let s = gaussian_stats(&arr2(&[[0.0, 0.0], [2.0, 0.0]])).unwrap();
        assert_eq!(s.mean.to_vec(), vec![1.0, 0.0]);
        assert_eq!(s.covariance, arr2(&[[2.0, 0.0], [0.0, 0.0]]));
        assert!(gaussian_stats(&arr2(&[[1.0, 2.0]])).is_err());
    }

    #[test]
    fn identical_rows_have_zero_covariance() {
        let s = gaussian_stats(&arr2(&[[1.5, -2.0, 3.0]; 6])).unwrap();
        assert!(s.covariance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_distances() {
        for k in [1, 3, 8] {
            let eye = Array2::eye(k);
            let mut shifted = Array1::zeros(k);
            shifted[0] = 2.0;
            let a = GaussianStats { mean: Array1::zeros(k), covariance: eye.clone() };
            let b = GaussianStats { mean: shifted, covariance: eye.clone() };
            assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap(), 4.0, epsilon = 1e-9);
            let wide = GaussianStats { mean: Array1::zeros(k), covariance: eye * 4.0 };
            assert_abs_diff_eq!(frechet_distance(&wide, &a).unwrap(), k as f64, epsilon = 1e-9);
            assert_abs_diff_eq!(frechet_distance(&a, &a).unwrap(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = GaussianStats { mean: Array1::zeros(2), covariance: Array2::eye(2) };
        let b = GaussianStats { mean: Array1::zeros(3), covariance: Array2::eye(3) };
        assert!(matches!(frechet_distance(&a, &b), Err(TryonError::ShapeMismatch(_))));
    }

    #[test]
    fn score_extremes() {
        let same = Array2::from_shape_fn((20, 4), |(_, j)| [0.1, 0.2, 0.3, 0.4][j]);
        let s = inception_score_from_probs(&same, 2).unwrap();
        assert_abs_diff_eq!(s.mean, 1.0, epsilon = 1e-12);
        let onehot = Array2::from_shape_fn((50, 10), |(i, j)| if i % 10 == j { 1.0 } else { 0.0 });
        assert_abs_diff_eq!(inception_score_from_probs(&onehot, 1).unwrap().mean, 10.0, epsilon = 1e-6);
        assert!(inception_score_from_probs(&onehot, 51).is_err());
        assert!(inception_score_from_probs(&onehot, 0).is_err());
    }
}
