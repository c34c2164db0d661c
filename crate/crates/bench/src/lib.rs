//! Problem instances shared by the benchmarks.

use maxent_steer::{DensityBoundary, GaussianMarginal, LinearSystemModel, SymMatrix};
use nalgebra::{DMatrix, DVector};

/// Two-state system with one input acting on the second state.
pub fn example_system(horizon: usize) -> LinearSystemModel {
    LinearSystemModel::time_invariant(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.05, 1.2]),
        DMatrix::from_row_slice(2, 1, &[0.0, 0.22]),
        horizon,
    )
    .expect("valid shapes")
}

pub fn example_boundary() -> DensityBoundary {
    DensityBoundary::new(
        GaussianMarginal::new(
            DVector::from_row_slice(&[-2.0, 4.0]),
            SymMatrix::from_row_slice(2, &[7.0, 3.0, 3.0, 5.0]),
        )
        .expect("pd"),
        GaussianMarginal::new(
            DVector::from_row_slice(&[1.0, 0.0]),
            SymMatrix::identity(2).scale(0.3),
        )
        .expect("pd"),
    )
    .expect("same dimension")
}
