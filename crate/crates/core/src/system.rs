//! Time-varying linear systems `x_{k+1} = A_k x_k + B_k u_k`: transition
//! matrices, reachability/controllability Gramians and the feasibility checks
//! the density-steering solver relies on.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianMarginal;
use crate::matrix::{checked_inverse, min_singular, rcond, rcond_sym, SymMatrix, RCOND_TOL};
use crate::steering::{normalized_boundary, DensityBoundary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSystemModel {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    n: usize,
    m: usize,
}

impl LinearSystemModel {
    pub fn new(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::DimensionMismatch(
                "horizon must be at least 1".into(),
            ));
        }
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} A matrices but {} B matrices",
                a.len(),
                b.len()
            )));
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        for (k, (ak, bk)) in a.iter().zip(&b).enumerate() {
            if ak.shape() != (n, n) {
                return Err(Error::DimensionMismatch(format!(
                    "A_{k} is {}x{}, expected {n}x{n}",
                    ak.nrows(),
                    ak.ncols()
                )));
            }
            if bk.shape() != (n, m) {
                return Err(Error::DimensionMismatch(format!(
                    "B_{k} is {}x{}, expected {n}x{m}",
                    bk.nrows(),
                    bk.ncols()
                )));
            }
        }
        Ok(Self { a, b, n, m })
    }

    /// Constant `(A, B)` replicated over `horizon` steps.
    pub fn time_invariant(a: DMatrix<f64>, b: DMatrix<f64>, horizon: usize) -> Result<Self> {
        Self::new(vec![a; horizon], vec![b; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn a(&self, k: usize) -> &DMatrix<f64> {
        &self.a[k]
    }

    pub fn b(&self, k: usize) -> &DMatrix<f64> {
        &self.b[k]
    }

    /// Same dynamics with every `B_k` multiplied by `s`.
    pub fn with_scaled_input(&self, s: f64) -> Self {
        Self {
            a: self.a.clone(),
            b: self.b.iter().map(|b| b * s).collect(),
            n: self.n,
            m: self.m,
        }
    }

    /// `B_k B_kᵀ`.
    pub fn input_gram(&self, k: usize) -> SymMatrix {
        SymMatrix::new(&self.b[k] * self.b[k].transpose())
    }

    pub fn a_inverse(&self, k: usize) -> Result<DMatrix<f64>> {
        checked_inverse(&self.a[k]).ok_or(Error::SingularA { step: k })
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k > self.horizon() {
            Err(Error::StepOutOfRange {
                step: k,
                horizon: self.horizon(),
            })
        } else {
            Ok(())
        }
    }

    /// State-transition matrix `Φ(k, l)`.
    ///
    /// For `k > l` this is `A_{k-1}⋯A_l`; for `k < l` it is
    /// `A_k⁻¹⋯A_{l-1}⁻¹` and requires every factor to be invertible.
    pub fn transition(&self, k: usize, l: usize) -> Result<DMatrix<f64>> {
        self.check_step(k)?;
        self.check_step(l)?;
        let mut phi = DMatrix::identity(self.n, self.n);
        if k > l {
            for j in l..k {
                phi = &self.a[j] * phi;
            }
        } else {
            for j in k..l {
                phi *= self.a_inverse(j)?;
            }
        }
        Ok(phi)
    }

    /// Forward transitions `Φ(k, 0)` for `k = 0..=N`.
    pub fn forward_transitions(&self) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(self.horizon() + 1);
        out.push(DMatrix::identity(self.n, self.n));
        for k in 0..self.horizon() {
            let next = &self.a[k] * &out[k];
            out.push(next);
        }
        out
    }

    /// Transitions `Φ(N, k)` for `k = 0..=N`, built without inverses.
    pub fn transitions_to_terminal(&self) -> Vec<DMatrix<f64>> {
        let horizon = self.horizon();
        let mut out = vec![DMatrix::identity(self.n, self.n); horizon + 1];
        for k in (0..horizon).rev() {
            out[k] = &out[k + 1] * &self.a[k];
        }
        out
    }

    fn check_window(&self, k1: usize, k0: usize) -> Result<()> {
        if k0 >= k1 || k1 > self.horizon() {
            Err(Error::BadWindow { k1, k0 })
        } else {
            Ok(())
        }
    }

    /// Reachability Gramian `G_r(k1, k0) = Σ_{k=k0}^{k1-1} Φ(k1,k+1) B_k B_kᵀ Φ(k1,k+1)ᵀ`,
    /// accumulated by the forward recursion `G ← A_k G A_kᵀ + B_k B_kᵀ`.
    pub fn reachability_gramian(&self, k1: usize, k0: usize) -> Result<SymMatrix> {
        self.check_window(k1, k0)?;
        let mut g = SymMatrix::zeros(self.n);
        for k in k0..k1 {
            g = g.congruence(&self.a[k]).add(&self.input_gram(k));
        }
        Ok(g)
    }

    /// Controllability Gramian `G_c(k1, k0) = Σ_{k=k0}^{k1-1} Φ(k0,k+1) B_k B_kᵀ Φ(k0,k+1)ᵀ`,
    /// accumulated backwards as `G ← A_k⁻¹ (G + B_k B_kᵀ) A_k⁻ᵀ`.
    pub fn controllability_gramian(&self, k1: usize, k0: usize) -> Result<SymMatrix> {
        self.check_window(k1, k0)?;
        let mut g = SymMatrix::zeros(self.n);
        for k in (k0..k1).rev() {
            let inv = self.a_inverse(k)?;
            g = g.add(&self.input_gram(k)).congruence(&inv);
        }
        Ok(g)
    }

    /// `G_r(k, 0)` for `k = 0..=N` (with `G_r(0,0) = 0`).
    pub fn reachability_from_start(&self) -> Vec<SymMatrix> {
        let mut out = Vec::with_capacity(self.horizon() + 1);
        out.push(SymMatrix::zeros(self.n));
        for k in 0..self.horizon() {
            let next = out[k].congruence(&self.a[k]).add(&self.input_gram(k));
            out.push(next);
        }
        out
    }

    /// `G_r(N, k)` for `k = 0..=N` (with `G_r(N,N) = 0`).
    pub fn reachability_to_terminal(&self) -> Vec<SymMatrix> {
        let horizon = self.horizon();
        let phi_n = self.transitions_to_terminal();
        let mut out = vec![SymMatrix::zeros(self.n); horizon + 1];
        for k in (0..horizon).rev() {
            let term = self.input_gram(k).congruence(&phi_n[k + 1]);
            out[k] = out[k + 1].add(&term);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInvertibility {
    pub step: usize,
    pub invertible: bool,
    /// Reciprocal 2-norm condition number.
    pub rcond: f64,
}

/// Which exceptional closed-form boundary case was detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExceptionalCase {
    /// Terminal covariance equals the free propagation of the initial one
    /// under pure `N(0, εI)` input noise; the forward matrix vanishes.
    ForwardNoisePropagation,
    /// Initial covariance equals the time-reversed noise propagation of the
    /// terminal one; the backward matrix vanishes.
    BackwardNoisePropagation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub a_invertible: Vec<StepInvertibility>,
    /// Smallest `k_r` such that `G_r(k,0)` is invertible on `[k_r, N]` and
    /// `G_r(N,k)` on `[0, k_r-1]`.
    pub gramian_window: Option<usize>,
    pub f_matrix_min_singular: Option<f64>,
    pub b_matrix_min_singular: Option<f64>,
    pub exceptional: Vec<ExceptionalCase>,
    pub feasible: bool,
    pub diagnostics: Vec<String>,
}

impl FeasibilityReport {
    /// First violated hypothesis, if any.
    pub fn failure(&self) -> Option<String> {
        if self.feasible {
            None
        } else {
            Some(
                self.diagnostics
                    .first()
                    .cloned()
                    .unwrap_or_else(|| "assumptions not satisfied".to_string()),
            )
        }
    }
}

/// Tolerance on the minimum singular values of the forward/backward matrices,
/// relative to `1 + ‖S₀‖₂`.
pub const BOUNDARY_MATRIX_RTOL: f64 = 1e-10;

fn a_invertibility(sys: &LinearSystemModel) -> Vec<StepInvertibility> {
    (0..sys.horizon())
        .map(|k| {
            let rc = rcond(sys.a(k));
            StepInvertibility {
                step: k,
                invertible: rc > RCOND_TOL,
                rcond: rc,
            }
        })
        .collect()
}

/// Smallest admissible `k_r`, or `None` when no window exists.
pub fn gramian_window(sys: &LinearSystemModel) -> Option<usize> {
    let horizon = sys.horizon();
    let from_start = sys.reachability_from_start();
    let to_end = sys.reachability_to_terminal();
    let inv = |g: &SymMatrix| rcond_sym(g) > RCOND_TOL;
    // forward_ok[k]: G_r(j,0) invertible for all j in [k, N]
    let mut forward_ok = vec![false; horizon + 2];
    forward_ok[horizon + 1] = true;
    for k in (1..=horizon).rev() {
        forward_ok[k] = forward_ok[k + 1] && inv(&from_start[k]);
    }
    let mut backward_ok = true; // G_r(N,j) invertible for all j in [0, k_r-1]
    for kr in 1..=horizon {
        backward_ok = backward_ok && inv(&to_end[kr - 1]);
        if !backward_ok {
            return None;
        }
        if forward_ok[kr] {
            return Some(kr);
        }
    }
    None
}

/// Checks the hypotheses under which the coupled Lyapunov system has the
/// closed-form minus-branch solution.
pub fn validate_assumptions(
    sys: &LinearSystemModel,
    boundary: &DensityBoundary,
    epsilon: f64,
) -> FeasibilityReport {
    let a_invertible = a_invertibility(sys);
    let window = gramian_window(sys);
    let mut diagnostics = Vec::new();
    let all_a = a_invertible.iter().all(|s| s.invertible);
    if !all_a {
        let bad: Vec<String> = a_invertible
            .iter()
            .filter(|s| !s.invertible)
            .map(|s| s.step.to_string())
            .collect();
        diagnostics.push(format!("A_k is singular at steps [{}]", bad.join(", ")));
    }
    if window.is_none() {
        diagnostics.push("no reachability Gramian window k_r exists".to_string());
        let n = sys.state_dim();
        if sys.horizon() < 2 * n - 1 {
            diagnostics.push(format!(
                "hint: horizon {} is shorter than 2n-1 = {}",
                sys.horizon(),
                2 * n - 1
            ));
        }
    }
    if epsilon <= 0.0 {
        diagnostics.push(format!("epsilon must be positive, got {epsilon}"));
    }

    let mut f_min = None;
    let mut b_min = None;
    let mut exceptional = Vec::new();
    let mut boundary_ok = false;
    if all_a && epsilon > 0.0 {
        match normalized_boundary(sys, &boundary.initial.cov, &boundary.terminal.cov, epsilon) {
            Ok(nb) => {
                let scale = 1.0 + nb.s0.eigenvalues().last().copied().unwrap_or(0.0);
                let fs = min_singular(nb.f_mat.as_matrix());
                let bs = min_singular(nb.b_mat.as_matrix());
                f_min = Some(fs);
                b_min = Some(bs);
                let tol = BOUNDARY_MATRIX_RTOL * scale;
                if fs <= tol {
                    exceptional.push(ExceptionalCase::ForwardNoisePropagation);
                    diagnostics.push(
                        "forward matrix is singular: terminal covariance equals free propagation \
                         of the initial covariance under N(0, εI) input noise"
                            .to_string(),
                    );
                }
                if bs <= tol {
                    exceptional.push(ExceptionalCase::BackwardNoisePropagation);
                    diagnostics.push(
                        "backward matrix is singular: initial covariance equals time-reversed \
                         propagation of the terminal covariance under N(0, εI) input noise"
                            .to_string(),
                    );
                }
                boundary_ok = fs > tol && bs > tol;
            }
            Err(e) => diagnostics.push(format!("cannot normalize boundary: {e}")),
        }
    }
    let feasible = all_a && window.is_some() && boundary_ok;
    FeasibilityReport {
        a_invertible,
        gramian_window: window,
        f_matrix_min_singular: f_min,
        b_matrix_min_singular: b_min,
        exceptional,
        feasible,
        diagnostics,
    }
}

/// Hypotheses of the point-to-point controller: invertible `A_k` and
/// invertible `G_r(N, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedFeasibility {
    pub a_invertible: Vec<StepInvertibility>,
    pub reachability_rcond: f64,
    pub feasible: bool,
    pub diagnostics: Vec<String>,
}

pub fn validate_pinned(sys: &LinearSystemModel) -> PinnedFeasibility {
    let a_invertible = a_invertibility(sys);
    let g = sys
        .reachability_gramian(sys.horizon(), 0)
        .expect("full window is valid");
    let reachability_rcond = rcond_sym(&g);
    let mut diagnostics = Vec::new();
    if a_invertible.iter().any(|s| !s.invertible) {
        diagnostics.push("A_k is singular at some step".to_string());
    }
    if reachability_rcond <= RCOND_TOL {
        diagnostics.push("reachability Gramian G_r(N,0) is singular".to_string());
    }
    PinnedFeasibility {
        feasible: diagnostics.is_empty(),
        a_invertible,
        reachability_rcond,
        diagnostics,
    }
}

/// Convenience used by tests and the CLI: validate and turn a failure into an error.
pub fn require_feasible(
    sys: &LinearSystemModel,
    initial: &GaussianMarginal,
    terminal: &GaussianMarginal,
    epsilon: f64,
) -> Result<FeasibilityReport> {
    let boundary = DensityBoundary {
        initial: initial.clone(),
        terminal: terminal.clone(),
    };
    let report = validate_assumptions(sys, &boundary, epsilon);
    match report.failure() {
        None => Ok(report),
        Some(why) => Err(Error::InfeasibleProblem(why)),
    }
}
