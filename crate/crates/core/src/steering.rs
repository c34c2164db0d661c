//! Gaussian density steering with an entropy-regularized input cost.
//!
//! The optimal policy is an LQR policy whose terminal weight is the inverse of
//! the backward factor `Q_N` of a pair of Lyapunov recursions
//! `P_{k+1} = A P Aᵀ + BBᵀ`, `Q_{k+1} = A Q Aᵀ − BBᵀ` tied together by
//! `ε Σ̄⁻¹ = P⁻¹ + Q⁻¹` at both ends. The pair is solved in coordinates where
//! the controllability Gramian is the identity and the dynamics are trivial.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianMarginal;
use crate::lqr::riccati_backward;
use crate::matrix::{
    checked_inverse, definiteness, max_abs, rcond_sym, DefinitenessReport, SymMatrix, RCOND_TOL,
};
use crate::pinned::tail_gains;
use crate::policy::{AffineGaussianPolicy, PolicyStep};
use crate::system::{validate_assumptions, FeasibilityReport, LinearSystemModel};

/// Initial and terminal marginals of a density-steering problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityBoundary {
    pub initial: GaussianMarginal,
    pub terminal: GaussianMarginal,
}

impl DensityBoundary {
    pub fn new(initial: GaussianMarginal, terminal: GaussianMarginal) -> Result<Self> {
        if initial.dim() != terminal.dim() {
            return Err(Error::DimensionMismatch(format!(
                "initial marginal has dimension {}, terminal {}",
                initial.dim(),
                terminal.dim()
            )));
        }
        Ok(Self { initial, terminal })
    }

    /// Same covariances, zero means.
    pub fn centered(&self) -> Self {
        let n = self.initial.dim();
        Self {
            initial: GaussianMarginal {
                mean: DVector::zeros(n),
                cov: self.initial.cov.clone(),
            },
            terminal: GaussianMarginal {
                mean: DVector::zeros(n),
                cov: self.terminal.cov.clone(),
            },
        }
    }
}

/// Boundary covariances expressed in unit-Gramian coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBoundary {
    /// `(1/ε) G_c^{-1/2} Σ̄₀ G_c^{-1/2}`
    pub s0: SymMatrix,
    /// `(1/ε) G_c^{-1/2} Φ(0,N) Σ̄_N Φ(0,N)ᵀ G_c^{-1/2}`
    pub sn: SymMatrix,
    /// `S₀ + ½I − (S₀^{1/2} S_N S₀^{1/2} + ¼I)^{1/2}`
    pub f_mat: SymMatrix,
    /// `−S₀ + ½I + (S₀^{1/2} S_N S₀^{1/2} + ¼I)^{1/2}`
    pub b_mat: SymMatrix,
    /// `S₀^{1/2}`
    pub s0_sqrt: SymMatrix,
    pub gc_sqrt: SymMatrix,
    pub gc_inv_sqrt: SymMatrix,
}

/// Left singular vectors and singular values of a wide factor `F`, i.e. the
/// eigenpairs of `F Fᵀ` without forming it. Small eigenvalues come out with
/// relative error `u·√cond` instead of `u·cond`.
fn factor_spectrum(f: DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    if f.ncols() < f.nrows() {
        return None;
    }
    let svd = f.svd(true, false);
    Some((svd.u?, svd.singular_values))
}

/// `U diag(g(σ)) Uᵀ`
fn spectral(u: &DMatrix<f64>, sv: &DVector<f64>, g: impl Fn(f64) -> f64) -> SymMatrix {
    SymMatrix::new(u * DMatrix::from_diagonal(&sv.map(g)) * u.transpose())
}

/// `G_c(N,0)^{±1/2}` from the factor `[Φ(0,k+1) B_k]_k`.
fn gramian_roots(sys: &LinearSystemModel) -> Result<(SymMatrix, SymMatrix)> {
    let (n, m, horizon) = (sys.state_dim(), sys.input_dim(), sys.horizon());
    let mut factor = DMatrix::zeros(n, horizon * m);
    let mut phi_back = DMatrix::identity(n, n);
    for k in 0..horizon {
        phi_back *= sys.a_inverse(k)?;
        factor
            .columns_mut(k * m, m)
            .copy_from(&(&phi_back * sys.b(k)));
    }
    let (u, sv) = factor_spectrum(factor).ok_or(Error::SingularGramian("controllability"))?;
    let (lo, hi) = (sv.min(), sv.max());
    if !(hi > 0.0) || (lo / hi).powi(2) <= RCOND_TOL {
        return Err(Error::SingularGramian("controllability"));
    }
    Ok((spectral(&u, &sv, |s| s), spectral(&u, &sv, |s| 1.0 / s)))
}

fn cholesky_factor(cov: &SymMatrix) -> Result<DMatrix<f64>> {
    cov.as_matrix()
        .clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite("boundary covariance"))
}

pub fn normalized_boundary(
    sys: &LinearSystemModel,
    cov0: &SymMatrix,
    cov_n: &SymMatrix,
    epsilon: f64,
) -> Result<NormalizedBoundary> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::NonpositiveEpsilon(epsilon));
    }
    let n = sys.state_dim();
    if cov0.dim() != n || cov_n.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "boundary covariances are {}x{} and {}x{}, state dimension is {n}",
            cov0.dim(),
            cov0.dim(),
            cov_n.dim(),
            cov_n.dim()
        )));
    }
    if !definiteness(cov0).is_pd() || !definiteness(cov_n).is_pd() {
        return Err(Error::NotPositiveDefinite("boundary covariance"));
    }
    let horizon = sys.horizon();
    let (gc_sqrt, gc_inv_sqrt) = gramian_roots(sys)?;
    let phi_back = sys.transition(0, horizon)?;
    // Square roots are taken from factors so that S₀ (often badly
    // conditioned) is never square-rooted after being formed.
    let scale = epsilon.sqrt().recip();
    let w = gc_inv_sqrt.as_matrix();
    let factor0 = w * cholesky_factor(cov0)? * scale;
    let factor_n = w * &phi_back * cholesky_factor(cov_n)? * scale;
    let (u0, sv0) =
        factor_spectrum(factor0).ok_or(Error::NotPositiveDefinite("boundary covariance"))?;
    let s0 = spectral(&u0, &sv0, |s| s * s);
    let s0_sqrt = spectral(&u0, &sv0, |s| s);
    let sn = SymMatrix::new(&factor_n * factor_n.transpose());
    let (ur, svr) = factor_spectrum(s0_sqrt.as_matrix() * &factor_n)
        .ok_or(Error::NotPositiveDefinite("boundary covariance"))?;
    let root = spectral(&ur, &svr, |s| (s * s + 0.25).sqrt());
    let half = SymMatrix::identity(n).scale(0.5);
    let f_mat = s0.add(&half).sub(&root);
    let b_mat = half.add(&root).sub(&s0);
    Ok(NormalizedBoundary {
        s0,
        sn,
        f_mat,
        b_mat,
        s0_sqrt,
        gc_sqrt,
        gc_inv_sqrt,
    })
}

/// Minus-branch solution of the coupled Lyapunov recursions.
///
/// `Q_k⁻¹` is obtained from the backward Riccati recursion started at
/// `Π_N = ε Σ̄_N⁻¹ − P_N⁻¹`, which is numerically far better behaved than
/// inverting `Q_k` itself (the latter is a small difference of large terms
/// whenever the dynamics have unstable modes). `P_k` is kept in unit-Gramian
/// coordinates `P̃_k = V_k P_k V_kᵀ` with `V_k = G_c^{-1/2} Φ(0,k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovPair {
    pub p: Vec<SymMatrix>,
    pub q: Vec<SymMatrix>,
    /// `Q_k⁻¹` for `k = 0..=N`.
    pub q_inv: Vec<SymMatrix>,
    pub p_normal: Vec<SymMatrix>,
    /// `V_k` for `k = 0..=N`.
    pub normal_map: Vec<DMatrix<f64>>,
    /// Definiteness of `I + B_kᵀ Q_{k+1}⁻¹ B_k` for `k = 0..N`.
    pub gates: Vec<DefinitenessReport>,
}

/// Max-abs residuals of a solved pair. Recursion residuals are relative to
/// `1 +` the largest term entering the recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovResiduals {
    /// `P_{k+1} − A P_k Aᵀ − BBᵀ`
    pub p_recursion: f64,
    /// `Q_{k+1} − A Q_k Aᵀ + BBᵀ`
    pub q_recursion: f64,
    /// `ε Σ̄₀⁻¹ − P₀⁻¹ − Q₀⁻¹`
    pub initial_boundary: f64,
    /// `ε Σ̄_N⁻¹ − P_N⁻¹ − Q_N⁻¹`
    pub terminal_boundary: f64,
    /// `(P_{k+1} + Q_{k+1}) − A (P_k + Q_k) Aᵀ`
    pub conservation: f64,
}

impl LyapunovResiduals {
    pub fn max(&self) -> f64 {
        [
            self.p_recursion,
            self.q_recursion,
            self.initial_boundary,
            self.terminal_boundary,
            self.conservation,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn max_boundary(&self) -> f64 {
        self.initial_boundary.max(self.terminal_boundary)
    }
}

fn step_residual(next: &DMatrix<f64>, terms: &[&DMatrix<f64>], value: &DMatrix<f64>) -> f64 {
    let scale = terms
        .iter()
        .map(|t| max_abs(t))
        .fold(max_abs(next), f64::max);
    max_abs(&(next - value)) / (1.0 + scale)
}

impl LyapunovPair {
    pub fn horizon(&self) -> usize {
        self.q.len() - 1
    }

    pub fn q_inverse(&self, k: usize) -> &SymMatrix {
        &self.q_inv[k]
    }

    /// `P_k⁻¹ = V_kᵀ P̃_k⁻¹ V_k`, or `None` if `P_k` is singular.
    pub fn p_inverse(&self, k: usize) -> Option<SymMatrix> {
        let inv = checked_inverse(self.p_normal[k].as_matrix())?;
        Some(SymMatrix::new(inv).congruence(&self.normal_map[k].transpose()))
    }

    pub fn residuals(
        &self,
        sys: &LinearSystemModel,
        cov0: &SymMatrix,
        cov_n: &SymMatrix,
        epsilon: f64,
    ) -> LyapunovResiduals {
        let horizon = self.horizon();
        let n = sys.state_dim();
        let mut p_rec: f64 = 0.0;
        let mut q_rec: f64 = 0.0;
        let mut cons: f64 = 0.0;
        for k in 0..horizon {
            let (a, b) = (sys.a(k), sys.b(k));
            let bb = b * b.transpose();
            let ap = a * self.p[k].as_matrix() * a.transpose();
            let aq = a * self.q[k].as_matrix() * a.transpose();
            p_rec = p_rec.max(step_residual(
                self.p[k + 1].as_matrix(),
                &[&ap, &bb],
                &(&ap + &bb),
            ));
            q_rec = q_rec.max(step_residual(
                self.q[k + 1].as_matrix(),
                &[&aq, &bb],
                &(&aq - &bb),
            ));
            let sum_next = self.p[k + 1].as_matrix() + self.q[k + 1].as_matrix();
            cons = cons.max(step_residual(&sum_next, &[&ap, &aq], &(&ap + &aq)));
        }
        let boundary = |cov: &SymMatrix, k: usize| {
            let nan = || DMatrix::from_element(n, n, f64::NAN);
            let target = checked_inverse(cov.as_matrix()).unwrap_or_else(nan) * epsilon;
            let p_inv = self
                .p_inverse(k)
                .map(SymMatrix::into_matrix)
                .unwrap_or_else(nan);
            max_abs(&(target - p_inv - self.q_inv[k].as_matrix()))
        };
        LyapunovResiduals {
            p_recursion: p_rec,
            q_recursion: q_rec,
            initial_boundary: boundary(cov0, 0),
            terminal_boundary: boundary(cov_n, horizon),
            conservation: cons,
        }
    }
}

/// Unit-Gramian maps `V_k = G_c^{-1/2} Φ(0,k)` and partial sums
/// `D_k = Σ_{j<k} V_{j+1} B_j B_jᵀ V_{j+1}ᵀ` (so `D_N = I`).
fn unit_gramian_frame(
    sys: &LinearSystemModel,
    nb: &NormalizedBoundary,
) -> Result<(Vec<DMatrix<f64>>, Vec<SymMatrix>)> {
    let horizon = sys.horizon();
    let n = sys.state_dim();
    let w = nb.gc_inv_sqrt.as_matrix();
    let mut maps = Vec::with_capacity(horizon + 1);
    maps.push(w.clone());
    let mut phi_back = DMatrix::identity(n, n); // Φ(0, k)
    for k in 0..horizon {
        phi_back *= sys.a_inverse(k)?;
        maps.push(w * &phi_back);
    }
    let mut sums = Vec::with_capacity(horizon + 1);
    sums.push(SymMatrix::zeros(n));
    for k in 0..horizon {
        let bt = &maps[k + 1] * sys.b(k);
        let next = sums[k].add(&SymMatrix::new(&bt * bt.transpose()));
        sums.push(next);
    }
    Ok((maps, sums))
}

/// `S₀^{1/2} M⁻¹ S₀^{1/2}`
fn sandwich_inverse(s0_sqrt: &SymMatrix, m: &SymMatrix) -> Result<SymMatrix> {
    let inv = checked_inverse(m.as_matrix())
        .ok_or_else(|| Error::InfeasibleProblem("boundary matrix is singular".to_string()))?;
    Ok(SymMatrix::new(inv).congruence(s0_sqrt.as_matrix()))
}

/// Minus-branch pair without the feasibility pre-check.
fn minus_branch(
    sys: &LinearSystemModel,
    nb: &NormalizedBoundary,
    cov_n: &SymMatrix,
    epsilon: f64,
) -> Result<LyapunovPair> {
    let horizon = sys.horizon();
    let n = sys.state_dim();
    let (normal_map, sums) = unit_gramian_frame(sys, nb)?;
    let p0 = sandwich_inverse(&nb.s0_sqrt, &nb.b_mat)?;
    let forward = sys.forward_transitions();
    let mut p_normal = Vec::with_capacity(horizon + 1);
    let mut p = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let pn = p0.add(&sums[k]);
        p.push(pn.congruence(&(&forward[k] * nb.gc_sqrt.as_matrix())));
        p_normal.push(pn);
    }
    // P̃_N = P̃₀ + I exactly; using the identity avoids round-off in D_N.
    let pn_inv = checked_inverse(p0.add(&SymMatrix::identity(n)).as_matrix()).ok_or_else(|| {
        Error::InfeasibleProblem("terminal forward factor is singular".to_string())
    })?;
    let target = cov_n
        .pd_inverse()
        .ok_or(Error::NotPositiveDefinite("boundary covariance"))?;
    let terminal_weight = target
        .scale(epsilon)
        .sub(&SymMatrix::new(pn_inv).congruence(&normal_map[horizon].transpose()));
    let ric = riccati_backward(sys, &terminal_weight).map_err(|e| match e {
        Error::GateNotPd { step } => Error::BranchDegenerate { step },
        other => other,
    })?;
    let q = ric
        .pi
        .iter()
        .enumerate()
        .map(|(k, pi)| {
            // Q_k = Π_k⁻¹; a singular Π_k would mean an unbounded Q_k.
            let step = k.min(horizon.saturating_sub(1));
            pi.try_inverse().ok_or(Error::BranchDegenerate { step })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LyapunovPair {
        p,
        q,
        q_inv: ric.pi,
        p_normal,
        normal_map,
        gates: ric.gate_reports,
    })
}

/// Gate check of the other root of the boundary quadratic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlusBranchReport {
    /// Whether every `Q_{+,k}` is invertible.
    pub invertible: bool,
    /// Definiteness of `I + B_kᵀ Q_{+,k+1}⁻¹ B_k`; `None` where `Q_{+,k+1}` is singular.
    pub gates: Vec<Option<DefinitenessReport>>,
}

/// Evaluates the plus branch in unit-Gramian coordinates. Only useful for
/// checking that it never yields a valid policy.
#[doc(hidden)]
pub fn plus_branch(
    sys: &LinearSystemModel,
    boundary: &DensityBoundary,
    epsilon: f64,
) -> Result<PlusBranchReport> {
    let nb = normalized_boundary(sys, &boundary.initial.cov, &boundary.terminal.cov, epsilon)?;
    let (maps, sums) = unit_gramian_frame(sys, &nb)?;
    // S₀ + ½I + (S₀^{1/2} S_N S₀^{1/2} + ¼I)^{1/2} = 𝓑 + 2 S₀
    let plus = nb.b_mat.add(&nb.s0.scale(2.0));
    let q0 = sandwich_inverse(&nb.s0_sqrt, &plus)?;
    let q_normal: Vec<SymMatrix> = sums.iter().map(|d| q0.sub(d)).collect();
    let invertible = q_normal.iter().all(|q| rcond_sym(q) > RCOND_TOL);
    let gates = (0..sys.horizon())
        .map(|k| {
            let qi = checked_inverse(q_normal[k + 1].as_matrix())?;
            let bt = &maps[k + 1] * sys.b(k);
            let m = bt.ncols();
            let gate = SymMatrix::new(DMatrix::identity(m, m) + bt.transpose() * qi * &bt);
            Some(definiteness(&gate))
        })
        .collect();
    Ok(PlusBranchReport { invertible, gates })
}

/// Minus-branch solution of the coupled Lyapunov system.
///
/// Fails with [`Error::InfeasibleProblem`] when the solvability hypotheses do
/// not hold and with [`Error::BranchDegenerate`] if a gate
/// `I + B_kᵀ Q_{k+1}⁻¹ B_k` is not positive definite.
pub fn solve_coupled_lyapunov(
    sys: &LinearSystemModel,
    boundary: &DensityBoundary,
    epsilon: f64,
) -> Result<LyapunovPair> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::NonpositiveEpsilon(epsilon));
    }
    let report = validate_assumptions(sys, boundary, epsilon);
    if let Some(why) = report.failure() {
        return Err(Error::InfeasibleProblem(why));
    }
    let nb = normalized_boundary(sys, &boundary.initial.cov, &boundary.terminal.cov, epsilon)?;
    minus_branch(sys, &nb, &boundary.terminal.cov, epsilon)
}

/// Zero-mean optimal policy `u ~ N(K_k x, ε (I + B_kᵀQ_{k+1}⁻¹B_k)⁻¹)` with
/// `K_k = −(I + B_kᵀQ_{k+1}⁻¹B_k)⁻¹ B_kᵀ Q_{k+1}⁻¹ A_k`.
pub fn optimal_density_policy(
    sys: &LinearSystemModel,
    lyap: &LyapunovPair,
    epsilon: f64,
) -> Result<AffineGaussianPolicy> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::NonpositiveEpsilon(epsilon));
    }
    let m = sys.input_dim();
    let steps = (0..sys.horizon())
        .map(|k| {
            let (a, b) = (sys.a(k), sys.b(k));
            let qi = lyap.q_inv[k + 1].as_matrix();
            let gate = DMatrix::identity(m, m) + b.transpose() * qi * b;
            let chol = SymMatrix::new(gate)
                .into_matrix()
                .cholesky()
                .ok_or(Error::BranchDegenerate { step: k })?;
            Ok(PolicyStep {
                gain: -chol.solve(&(b.transpose() * qi * a)),
                feedforward: DVector::zeros(m),
                noise_cov: SymMatrix::new(chol.inverse() * epsilon),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AffineGaussianPolicy { steps })
}

/// Minimum-energy input sequence moving the mean from `μ̄₀` to `μ̄_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSteering {
    /// `ū*_k` for `k = 0..N`.
    pub inputs: Vec<DVector<f64>>,
    /// `μ*_k` for `k = 0..=N`.
    pub path: Vec<DVector<f64>>,
}

impl MeanSteering {
    /// `Σ_k ½ ‖ū*_k‖²`
    pub fn cost(&self) -> f64 {
        0.5 * self.inputs.iter().map(|u| u.norm_squared()).sum::<f64>()
    }
}

/// `ū*_k = B_kᵀ Φ(N,k+1)ᵀ G_r(N,0)⁻¹ (μ̄_N − Φ(N,0) μ̄₀)` and the mean path it drives.
///
/// The inputs are evaluated in the equivalent receding form
/// `ū*_k = B_kᵀ Φ(N,k+1)ᵀ G_r(N,k)^† (μ̄_N − Φ(N,k) μ*_k)`, which re-solves the
/// remaining minimum-energy problem at every step. Along the optimal path the
/// two agree; the receding form does not let round-off in early inputs be
/// amplified by unstable modes. The gains are those of the pinned controller.
pub fn mean_steering(
    sys: &LinearSystemModel,
    mean0: &DVector<f64>,
    mean_n: &DVector<f64>,
) -> Result<MeanSteering> {
    let n = sys.state_dim();
    if mean0.len() != n || mean_n.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "means have lengths {} and {}, state dimension is {n}",
            mean0.len(),
            mean_n.len()
        )));
    }
    let horizon = sys.horizon();
    let tail = sys.reachability_to_terminal();
    if rcond_sym(&tail[0]) <= RCOND_TOL {
        return Err(Error::SingularGramian("reachability"));
    }
    let gains = tail_gains(sys);
    let mut inputs = Vec::with_capacity(horizon);
    let mut path = Vec::with_capacity(horizon + 1);
    path.push(mean0.clone());
    for (k, g) in gains.iter().enumerate() {
        let u = &g.gain * &path[k] + &g.target_gain * mean_n;
        let next = sys.a(k) * &path[k] + sys.b(k) * &u;
        inputs.push(u);
        path.push(next);
    }
    Ok(MeanSteering { inputs, path })
}

/// Everything produced by a density-steering solve.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySolution {
    pub feasibility: FeasibilityReport,
    pub lyapunov: LyapunovPair,
    pub means: MeanSteering,
    pub policy: AffineGaussianPolicy,
}

/// Solves the problem with general boundary means: the zero-mean gains act on
/// the deviation from the optimal mean path, `u ~ N(K_k (x − μ*_k) + ū*_k, R_k)`,
/// stored as `c_k = ū*_k − K_k μ*_k`.
pub fn solve_density(
    sys: &LinearSystemModel,
    boundary: &DensityBoundary,
    epsilon: f64,
) -> Result<DensitySolution> {
    let lyapunov = solve_coupled_lyapunov(sys, boundary, epsilon)?;
    let feasibility = validate_assumptions(sys, boundary, epsilon);
    let mut policy = optimal_density_policy(sys, &lyapunov, epsilon)?;
    let means = mean_steering(sys, &boundary.initial.mean, &boundary.terminal.mean)?;
    for (k, step) in policy.steps.iter_mut().enumerate() {
        step.feedforward = &means.inputs[k] - &step.gain * &means.path[k];
    }
    Ok(DensitySolution {
        feasibility,
        lyapunov,
        means,
        policy,
    })
}

pub fn general_policy(
    sys: &LinearSystemModel,
    boundary: &DensityBoundary,
    epsilon: f64,
) -> Result<AffineGaussianPolicy> {
    Ok(solve_density(sys, boundary, epsilon)?.policy)
}
