use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{definiteness, psd_sqrt, SymMatrix};

/// Mean and covariance of a Gaussian law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMarginal {
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
}

impl GaussianMarginal {
    /// Builds a marginal whose covariance must be positive definite.
    pub fn new(mean: DVector<f64>, cov: SymMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        if !definiteness(&cov).is_pd() {
            return Err(Error::NotPositiveDefinite("boundary covariance"));
        }
        Ok(Self { mean, cov })
    }

    pub fn zero_mean(cov: SymMatrix) -> Result<Self> {
        let n = cov.dim();
        Self::new(DVector::zeros(n), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Points on the level set `{x : xᵀ Σ⁻¹ x = level²}` of a 2-D covariance,
/// parameterized by angle as `x(θ) = level · Σ^{1/2} (cos θ, sin θ)`.
///
/// Returns `(θ, x)` pairs for `count` equally spaced angles in `[0, 2π)`.
pub fn ellipse_points(cov: &SymMatrix, level: f64, count: usize) -> Result<Vec<(f64, [f64; 2])>> {
    if cov.dim() != 2 {
        return Err(Error::NotTwoDimensional(cov.dim()));
    }
    if !definiteness(cov).is_pd() {
        return Err(Error::NotPositiveDefinite("ellipse covariance"));
    }
    let root = psd_sqrt(cov)?;
    Ok((0..count)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / count as f64;
            let p: DMatrix<f64> = root.as_matrix()
                * DMatrix::from_column_slice(2, 1, &[theta.cos(), theta.sin()])
                * level;
            (theta, [p[(0, 0)], p[(1, 0)]])
        })
        .collect())
}
