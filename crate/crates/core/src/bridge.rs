//! Schrödinger-bridge checks for the density-steering solution.
//!
//! With unit temperature the optimal closed loop is the noise-driven chain
//! `x_{k+1} = A_k x_k + B_k w_k` reweighted to the boundary marginals: it has
//! the same pinned bridges as that chain and an optimal `(x_0, x_N)` coupling.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqr::epsilon_normalize;
use crate::matrix::{checked_inverse, definiteness, max_abs, psd_sqrt, SymMatrix};
use crate::pinned::pinned_controller;
use crate::policy::AffineGaussianPolicy;
use crate::steering::{
    optimal_density_policy, solve_coupled_lyapunov, DensityBoundary, LyapunovPair,
};
use crate::system::{validate_pinned, LinearSystemModel};

fn logdet_pd(m: &SymMatrix, what: &'static str) -> Result<f64> {
    let chol = m
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(what))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// `KL(N(0, Σ) ‖ N(0, Ξ)) = ½ (log det Ξ − log det Σ + tr(Ξ⁻¹Σ) − n)`.
pub fn gaussian_kl(sigma: &SymMatrix, xi: &SymMatrix) -> Result<f64> {
    if sigma.dim() != xi.dim() {
        return Err(Error::DimensionMismatch(format!(
            "KL arguments are {}x{} and {}x{}",
            sigma.dim(),
            sigma.dim(),
            xi.dim(),
            xi.dim()
        )));
    }
    let n = sigma.dim() as f64;
    let ld_sigma = logdet_pd(sigma, "first KL argument")?;
    let chol_xi = xi
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("second KL argument"))?;
    let ld_xi = 2.0 * chol_xi.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = chol_xi.solve(sigma.as_matrix()).trace();
    Ok(0.5 * (ld_xi - ld_sigma + trace - n))
}

/// Data of the `(x_0, x_N)` coupling problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingProblem {
    pub cov0: SymMatrix,
    pub cov_n: SymMatrix,
    /// `Φ(N, 0)`
    pub transition: DMatrix<f64>,
    /// `G_r(N, 0)`
    pub reach: SymMatrix,
}

impl CouplingProblem {
    pub fn new(sys: &LinearSystemModel, boundary: &DensityBoundary) -> Result<Self> {
        let horizon = sys.horizon();
        Ok(Self {
            cov0: boundary.initial.cov.clone(),
            cov_n: boundary.terminal.cov.clone(),
            transition: sys.forward_transitions().swap_remove(horizon),
            reach: sys.reachability_gramian(horizon, 0)?,
        })
    }

    /// `f(Y) = log det(Σ̄_N − Y Σ̄₀⁻¹ Yᵀ) + 2 tr(Φ(N,0)ᵀ G_r(N,0)⁻¹ Y)`;
    /// `None` when the joint covariance with cross block `Y` is not positive definite.
    pub fn objective(&self, y: &DMatrix<f64>) -> Option<f64> {
        let cov0_inv = self.cov0.pd_inverse()?;
        let schur = self.cov_n.sub(&cov0_inv.congruence(y));
        if !definiteness(&schur).is_pd() {
            return None;
        }
        let ld = logdet_pd(&schur, "coupling Schur complement").ok()?;
        let reach_inv = checked_inverse(self.reach.as_matrix())?;
        Some(ld + 2.0 * (self.transition.transpose() * reach_inv * y).trace())
    }

    /// `Σ̄_N − Y Σ̄₀⁻¹ Yᵀ`, the covariance of `x_N` given `x_0`.
    pub fn schur(&self, y: &DMatrix<f64>) -> Option<SymMatrix> {
        Some(self.cov_n.sub(&self.cov0.pd_inverse()?.congruence(y)))
    }

    /// Gradient-of-`f` residual
    /// `−2 Σ̄₀⁻¹ Yᵀ S⁻¹ + 2 Φ(N,0)ᵀ G_r(N,0)⁻¹` with `S` from [`Self::schur`].
    pub fn first_order_residual(
        &self,
        y: &DMatrix<f64>,
        schur: &SymMatrix,
    ) -> Result<DMatrix<f64>> {
        let cov0_inv = self
            .cov0
            .pd_inverse()
            .ok_or(Error::NotPositiveDefinite("initial covariance"))?;
        let schur_inv = schur
            .pd_inverse()
            .ok_or(Error::NotPositiveDefinite("coupling Schur complement"))?;
        let reach_inv = self
            .reach
            .pd_inverse()
            .ok_or(Error::SingularGramian("reachability"))?;
        Ok(
            -2.0 * cov0_inv.as_matrix() * y.transpose() * schur_inv.as_matrix()
                + 2.0 * self.transition.transpose() * reach_inv.as_matrix(),
        )
    }

    /// KL of the coupling with cross block `Y` from the reference coupling,
    /// as the expected KL of the `x_N | x_0` laws (both share the `x_0` law).
    pub fn conditional_kl(&self, y: &DMatrix<f64>, schur: &SymMatrix) -> Result<f64> {
        let n = self.cov0.dim() as f64;
        let cov0_inv = self
            .cov0
            .pd_inverse()
            .ok_or(Error::NotPositiveDefinite("initial covariance"))?;
        let drift = y * cov0_inv.as_matrix() - &self.transition;
        let chol = self
            .reach
            .as_matrix()
            .clone()
            .cholesky()
            .ok_or(Error::SingularGramian("reachability"))?;
        let ld_reach = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ld_schur = logdet_pd(schur, "coupling Schur complement")?;
        let spread = schur.add(&self.cov0.congruence(&drift));
        let trace = chol.solve(spread.as_matrix()).trace();
        Ok(0.5 * (ld_reach - ld_schur + trace - n))
    }

    /// Joint covariance of `(x_0, x_N)` with cross block `Y = Cov(x_N, x_0)`.
    pub fn joint(&self, y: &DMatrix<f64>) -> SymMatrix {
        let n = self.cov0.dim();
        let mut j = DMatrix::zeros(2 * n, 2 * n);
        j.view_mut((0, 0), (n, n)).copy_from(self.cov0.as_matrix());
        j.view_mut((n, 0), (n, n)).copy_from(y);
        j.view_mut((0, n), (n, n)).copy_from(&y.transpose());
        j.view_mut((n, n), (n, n)).copy_from(self.cov_n.as_matrix());
        SymMatrix::new(j)
    }

    /// Joint covariance of `(x_0, x_N)` under the noise-driven chain from `N(0, Σ̄₀)`.
    pub fn reference_joint(&self) -> SymMatrix {
        let n = self.cov0.dim();
        let y = &self.transition * self.cov0.as_matrix();
        let terminal = self.cov0.congruence(&self.transition).add(&self.reach);
        let mut j = self.joint(&y).into_matrix();
        j.view_mut((n, n), (n, n)).copy_from(terminal.as_matrix());
        SymMatrix::new(j)
    }
}

/// Residuals of the bridge characterization. All are max-abs values
/// relative to `1 +` the largest term they compare.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeResiduals {
    /// Stationarity of `f` at the optimal cross covariance.
    pub first_order: f64,
    /// `J_k = R₁ + R₁ Q_k⁻¹ R₂ − R₂` over `k`, with `R₁ = G_c(N,k)` of the
    /// open loop and `R₂` the same Gramian of the optimal closed loop.
    pub j_identity: f64,
    /// Pinned-controller target gains, open loop vs optimal closed loop.
    pub pinned_target_gain: f64,
    /// Pinned closed-loop matrices, open vs closed loop.
    pub pinned_closed_loop: f64,
    /// Pinned state noise covariances, open vs closed loop.
    pub pinned_noise: f64,
    /// `|path KL − coupling KL| / (1 + coupling KL)`.
    pub kl_gap: f64,
}

impl BridgeResiduals {
    pub fn max(&self) -> f64 {
        [
            self.first_order,
            self.j_identity,
            self.pinned_target_gain,
            self.pinned_closed_loop,
            self.pinned_noise,
            self.kl_gap,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("first-order", self.first_order),
            ("j-identity", self.j_identity),
            ("pinned-target-gain", self.pinned_target_gain),
            ("pinned-closed-loop", self.pinned_closed_loop),
            ("pinned-noise", self.pinned_noise),
            ("kl-gap", self.kl_gap),
        ]
    }
}

/// Outcome of the random-perturbation maximality check of `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCheck {
    /// Perturbations drawn, feasible or not.
    pub attempts: usize,
    /// Perturbations keeping the joint covariance positive definite.
    pub feasible: usize,
    /// Feasible perturbations with `f(Y + δE) > f(Y)`.
    pub improved: usize,
    /// Largest `f(Y + δE) − f(Y)` seen over feasible perturbations.
    pub best_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    /// Temperature of the original problem; the checks run at unit temperature.
    pub epsilon: f64,
    pub residuals: BridgeResiduals,
    pub path_kl: f64,
    pub coupling_kl: f64,
    pub perturbation: PerturbationCheck,
}

/// Relative max-abs difference.
fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs(&(a - b)) / (1.0 + max_abs(a).max(max_abs(b)))
}

/// Expected KL from the optimal closed loop to the noise-driven chain, summed
/// over steps. Each step compares input laws `N(K_k x + c_k, R_k)` and `N(0, I)`
/// under the optimal state law; input directions in `ker B_k` contribute nothing
/// since the optimal law leaves them at `N(0, I)`.
pub fn path_kl(
    sys: &LinearSystemModel,
    policy: &AffineGaussianPolicy,
    boundary: &DensityBoundary,
) -> Result<f64> {
    let moments = policy.propagate_moments(sys, &boundary.initial.mean, &boundary.initial.cov)?;
    let mut total = 0.0;
    for (k, step) in policy.steps.iter().enumerate() {
        let m = step.noise_cov.dim() as f64;
        let mean_u = &step.gain * &moments[k].mean + &step.feedforward;
        let spread = moments[k].cov.congruence(&step.gain).trace();
        let ld = logdet_pd(&step.noise_cov, "policy noise covariance")?;
        total += 0.5 * (step.noise_cov.trace() + mean_u.norm_squared() + spread - m - ld);
    }
    Ok(total)
}

/// Closed-loop system of the unit-temperature optimal policy:
/// `A_Q = A + B K`, `B_Q = B R^{1/2}`.
fn optimal_closed_loop(
    sys: &LinearSystemModel,
    policy: &AffineGaussianPolicy,
) -> Result<LinearSystemModel> {
    let a = (0..sys.horizon())
        .map(|k| policy.closed_loop_matrix(sys, k))
        .collect();
    let b = (0..sys.horizon())
        .map(|k| Ok(sys.b(k) * psd_sqrt(&policy.steps[k].noise_cov)?.into_matrix()))
        .collect::<Result<Vec<_>>>()?;
    LinearSystemModel::new(a, b)
}

fn j_identity(
    sys: &LinearSystemModel,
    closed: &LinearSystemModel,
    pair: &LyapunovPair,
) -> Result<f64> {
    let horizon = sys.horizon();
    let mut worst: f64 = 0.0;
    for k in 0..horizon {
        let r1 = sys.controllability_gramian(horizon, k)?;
        let r2 = closed.controllability_gramian(horizon, k)?;
        let cross = r1.as_matrix() * pair.q_inverse(k).as_matrix() * r2.as_matrix();
        let j = r1.as_matrix() + &cross - r2.as_matrix();
        let scale = max_abs(r1.as_matrix())
            .max(max_abs(r2.as_matrix()))
            .max(max_abs(&cross));
        worst = worst.max(max_abs(&j) / (1.0 + scale));
    }
    Ok(worst)
}

fn pinned_equality(sys: &LinearSystemModel, closed: &LinearSystemModel) -> Result<(f64, f64, f64)> {
    if !validate_pinned(closed).feasible {
        return Err(Error::InfeasibleProblem(
            "optimal closed loop violates the pinned-controller hypotheses".to_string(),
        ));
    }
    let target = nalgebra::DVector::zeros(sys.state_dim());
    let open = pinned_controller(sys, &target)?;
    let shut = pinned_controller(closed, &target)?;
    let mut out = (0.0_f64, 0.0_f64, 0.0_f64);
    for (x, y) in open.steps.iter().zip(&shut.steps) {
        out.0 = out
            .0
            .max(rel_diff(&x.state_target_gain, &y.state_target_gain));
        out.1 = out.1.max(rel_diff(&x.closed_loop, &y.closed_loop));
        out.2 = out.2.max(rel_diff(
            x.state_noise.as_matrix(),
            y.state_noise.as_matrix(),
        ));
    }
    Ok(out)
}

/// Draws random directions `E` (standard-normal entries scaled to unit
/// Frobenius norm) until `wanted` of the perturbations `Y + δE` are feasible,
/// giving up after `MAX_ATTEMPTS_FACTOR · wanted` draws.
pub fn perturbation_check(
    problem: &CouplingProblem,
    y: &DMatrix<f64>,
    wanted: usize,
    delta: f64,
    seed: u64,
) -> PerturbationCheck {
    let base = problem.objective(y).unwrap_or(f64::NAN);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut attempts, mut feasible, mut improved) = (0, 0, 0);
    let mut best_gain = f64::NEG_INFINITY;
    while feasible < wanted && attempts < MAX_ATTEMPTS_FACTOR * wanted {
        attempts += 1;
        let e: DMatrix<f64> =
            DMatrix::from_fn(y.nrows(), y.ncols(), |_, _| StandardNormal.sample(&mut rng));
        let e: DMatrix<f64> = &e / e.norm();
        if let Some(v) = problem.objective(&(y + e * delta)) {
            feasible += 1;
            let gain = v - base;
            best_gain = best_gain.max(gain);
            if gain > 0.0 {
                improved += 1;
            }
        }
    }
    PerturbationCheck {
        attempts,
        feasible,
        improved,
        best_gain,
    }
}

const MAX_ATTEMPTS_FACTOR: usize = 20;
pub const PERTURBATION_TRIALS: usize = 100;
pub const PERTURBATION_DELTA: f64 = 1e-2;
pub const PERTURBATION_SEED: u64 = 0x5eed;

/// Runs the bridge checks. The problem is first rescaled to unit temperature
/// (`B ↦ √ε B`, boundary covariances unchanged); boundary means are ignored.
pub fn bridge_verify(
    sys: &LinearSystemModel,
    boundary: &DensityBoundary,
    epsilon: f64,
) -> Result<BridgeReport> {
    let unit = epsilon_normalize(sys, &SymMatrix::zeros(sys.state_dim()), epsilon)?.system;
    let centered = boundary.centered();
    let pair = solve_coupled_lyapunov(&unit, &centered, 1.0)?;
    let policy = optimal_density_policy(&unit, &pair, 1.0)?;
    let closed = optimal_closed_loop(&unit, &policy)?;

    let problem = CouplingProblem::new(&unit, &centered)?;
    let horizon = unit.horizon();
    let y = closed.forward_transitions().swap_remove(horizon) * centered.initial.cov.as_matrix();
    // The closed loop's own Gramian is the conditional covariance, free of the
    // cancellation in `Σ̄_N − Y Σ̄₀⁻¹ Yᵀ`.
    let schur = closed.reachability_gramian(horizon, 0)?;
    let grad = problem.first_order_residual(&y, &schur)?;
    let reach_inv = problem
        .reach
        .pd_inverse()
        .ok_or(Error::SingularGramian("reachability"))?;
    let grad_scale = 2.0 * max_abs(&(problem.transition.transpose() * reach_inv.as_matrix()));
    let first_order = max_abs(&grad) / (1.0 + grad_scale);

    let j = j_identity(&unit, &closed, &pair)?;
    let (tg, cl, nz) = pinned_equality(&unit, &closed)?;

    let path = path_kl(&unit, &policy, &centered)?;
    let coupling = problem.conditional_kl(&y, &schur)?;
    let kl_gap = (path - coupling).abs() / (1.0 + coupling.abs());

    let perturbation = perturbation_check(
        &problem,
        &y,
        PERTURBATION_TRIALS,
        PERTURBATION_DELTA,
        PERTURBATION_SEED,
    );
    Ok(BridgeReport {
        epsilon,
        residuals: BridgeResiduals {
            first_order,
            j_identity: j,
            pinned_target_gain: tg,
            pinned_closed_loop: cl,
            pinned_noise: nz,
            kl_gap,
        },
        path_kl: path,
        coupling_kl: coupling,
        perturbation,
    })
}
