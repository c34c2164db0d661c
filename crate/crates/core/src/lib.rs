//! Maximum-entropy optimal control of linear systems: entropy-regularized LQR,
//! Gaussian density steering, point-to-point steering and the associated
//! Schrödinger-bridge checks.

pub mod bridge;
pub mod error;
pub mod gaussian;
pub mod lqr;
pub mod matrix;
pub mod pinned;
pub mod policy;
pub mod simulate;
pub mod steering;
pub mod system;

pub use bridge::{
    bridge_verify, gaussian_kl, path_kl, perturbation_check, BridgeReport, BridgeResiduals,
    CouplingProblem, PerturbationCheck,
};
pub use error::{Error, Result};
pub use gaussian::{ellipse_points, GaussianMarginal};
pub use lqr::{
    denormalize_policy, epsilon_normalize, lqr_policy, riccati_backward, NormalizedLqr,
    RiccatiSolution,
};
pub use matrix::{
    definiteness, gaussian_condition, pinv, psd_sqrt, DefinitenessReport, SymMatrix, Verdict,
};
pub use pinned::{
    conditional_gaussian_oracle, controllability_to_terminal, pinned_controller,
    pinned_moments_controller, point_to_point_policy, PinnedController, PinnedMoments, PinnedStep,
};
pub use policy::{AffineGaussianPolicy, PolicyStep, StateMoments};
pub use simulate::{
    dynamics_residual, empirical_moments, sample_ensemble, EmpiricalMoments, InitialState,
    TrajectoryEnsemble,
};
pub use steering::{
    general_policy, mean_steering, normalized_boundary, optimal_density_policy,
    solve_coupled_lyapunov, solve_density, DensityBoundary, DensitySolution, LyapunovPair,
    MeanSteering, NormalizedBoundary,
};
pub use system::{validate_assumptions, validate_pinned, FeasibilityReport, LinearSystemModel};

pub use nalgebra::{DMatrix, DVector};
