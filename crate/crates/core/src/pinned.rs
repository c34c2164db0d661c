//! Point-to-point steering: the zero-terminal-variance limit of density
//! steering, and the pinned (bridge) process it generates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{gaussian_condition, pinv, rcond_sym, SymMatrix, RCOND_TOL};
use crate::policy::{AffineGaussianPolicy, PolicyStep};
use crate::system::{validate_pinned, LinearSystemModel};

/// One step of the point-to-point controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedStep {
    /// `K_k = −B_kᵀ Φ(N,k+1)ᵀ G_r(N,k)^† Φ(N,k)`
    pub gain: DMatrix<f64>,
    /// `B_kᵀ Φ(N,k+1)ᵀ G_r(N,k)^†`, applied to `x̄_N`.
    pub target_gain: DMatrix<f64>,
    /// `I − B_kᵀ Φ(N,k+1)ᵀ G_r(N,k)^† Φ(N,k+1) B_k`, positive semidefinite.
    pub input_cov: SymMatrix,
    /// `Â_k = A_k + B_k K_k`
    pub closed_loop: DMatrix<f64>,
    /// `B_k B_kᵀ Φ(N,k+1)ᵀ G_r(N,k)^†`
    pub state_target_gain: DMatrix<f64>,
    /// `Λ_k = B_k (input_cov) B_kᵀ`
    pub state_noise: SymMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedController {
    pub steps: Vec<PinnedStep>,
    pub target: DVector<f64>,
}

fn check_endpoints(
    sys: &LinearSystemModel,
    start: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<()> {
    let n = sys.state_dim();
    if start.len() != n || target.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "endpoints have lengths {} and {}, state dimension is {n}",
            start.len(),
            target.len()
        )));
    }
    Ok(())
}

fn require_pinned_hypotheses(sys: &LinearSystemModel) -> Result<()> {
    let report = validate_pinned(sys);
    if let Some(bad) = report.a_invertible.iter().find(|s| !s.invertible) {
        return Err(Error::SingularA { step: bad.step });
    }
    if !report.feasible {
        return Err(Error::SingularGramian("reachability"));
    }
    Ok(())
}

/// The input covariance has eigenvalues in `[0, 1]`; those within round-off
/// of zero are set to exactly zero so the terminal pinning stays exact.
fn clean_projection(m: DMatrix<f64>) -> SymMatrix {
    let eig = SymMatrix::new(m).into_matrix().symmetric_eigen();
    let values = eig
        .eigenvalues
        .map(|v| if v < PROJECTION_ZERO { 0.0 } else { v });
    SymMatrix::new(
        &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose(),
    )
}

const PROJECTION_ZERO: f64 = 1e-12;

/// `(Φ(k+1,N) G_r(N,k) Φ(k+1,N)ᵀ, Φ(k+1,N))` for each `k`, by the backward
/// recursion `M_{k+1} = B_k B_kᵀ + A_{k+1}⁻¹ M_{k+2} A_{k+1}⁻ᵀ`.
fn local_tail_frames(sys: &LinearSystemModel) -> Result<Vec<(SymMatrix, DMatrix<f64>)>> {
    let (n, horizon) = (sys.state_dim(), sys.horizon());
    let mut out = Vec::with_capacity(horizon);
    let mut later = SymMatrix::zeros(n);
    let mut from_end = DMatrix::identity(n, n);
    for k in (0..horizon).rev() {
        if k + 1 < horizon {
            let inv = sys.a_inverse(k + 1)?;
            later = later.congruence(&inv);
            from_end = inv * from_end;
        }
        later = later.add(&sys.input_gram(k));
        out.push((later.clone(), from_end.clone()));
    }
    out.reverse();
    Ok(out)
}

/// Minimum-energy steering gains of one step.
#[derive(Debug, Clone)]
pub(crate) struct TailGains {
    /// `B_kᵀ Φ(N,k+1)ᵀ G_r(N,k)^†`
    pub target_gain: DMatrix<f64>,
    /// `−B_kᵀ Φ(N,k+1)ᵀ G_r(N,k)^† Φ(N,k)`
    pub gain: DMatrix<f64>,
    /// `B_kᵀ Φ(N,k+1)ᵀ G_r(N,k)^† Φ(N,k+1) B_k`
    pub projection: DMatrix<f64>,
}

/// Gains for every step. With `M = Φ(k+1,N) G_r(N,k) Φ(k+1,N)ᵀ` they read
/// `B_kᵀ M⁻¹ Φ(k+1,N)`, `−B_kᵀ M⁻¹ A_k` and `B_kᵀ M⁻¹ B_k`; that frame is used
/// whenever `M` is better conditioned than `G_r(N,k)`, which on expanding
/// systems is by orders of magnitude. Otherwise, and when some `A_k` is
/// singular, the pseudoinverse form is used.
pub(crate) fn tail_gains(sys: &LinearSystemModel) -> Vec<TailGains> {
    let to_end = sys.transitions_to_terminal();
    let tail = sys.reachability_to_terminal();
    let local = local_tail_frames(sys).ok();
    (0..sys.horizon())
        .map(|k| {
            let (a, b) = (sys.a(k), sys.b(k));
            let framed = local.as_ref().and_then(|frames| {
                let (frame, from_end) = &frames[k];
                if rcond_sym(frame) <= rcond_sym(&tail[k]).max(RCOND_TOL) {
                    return None;
                }
                let chol = frame.as_matrix().clone().cholesky()?;
                let solved_b = chol.solve(b);
                Some(TailGains {
                    target_gain: solved_b.transpose() * from_end,
                    gain: -(solved_b.transpose() * a),
                    projection: b.transpose() * &solved_b,
                })
            });
            framed.unwrap_or_else(|| {
                let target_gain =
                    b.transpose() * to_end[k + 1].transpose() * pinv(tail[k].as_matrix());
                TailGains {
                    gain: -(&target_gain * &to_end[k]),
                    projection: &target_gain * &to_end[k + 1] * b,
                    target_gain,
                }
            })
        })
        .collect()
}

/// Builds the controller that drives every path to `target` at step `N`.
pub fn pinned_controller(
    sys: &LinearSystemModel,
    target: &DVector<f64>,
) -> Result<PinnedController> {
    check_endpoints(sys, target, target)?;
    require_pinned_hypotheses(sys)?;
    let m = sys.input_dim();
    let steps = tail_gains(sys)
        .into_iter()
        .enumerate()
        .map(
            |(
                k,
                TailGains {
                    target_gain,
                    gain,
                    projection,
                },
            )| {
                let (a, b) = (sys.a(k), sys.b(k));
                let input_cov = clean_projection(DMatrix::identity(m, m) - projection);
                let closed_loop = a + b * &gain;
                let state_target_gain = b * &target_gain;
                let state_noise = input_cov.congruence(b);
                PinnedStep {
                    gain,
                    target_gain,
                    input_cov,
                    closed_loop,
                    state_target_gain,
                    state_noise,
                }
            },
        )
        .collect();
    Ok(PinnedController {
        steps,
        target: target.clone(),
    })
}

impl PinnedController {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// The controller as a policy `u ~ N(K_k x + c_k, input_cov)` with `c_k = target_gain · x̄_N`.
    pub fn policy(&self) -> AffineGaussianPolicy {
        AffineGaussianPolicy {
            steps: self
                .steps
                .iter()
                .map(|s| PolicyStep {
                    gain: s.gain.clone(),
                    feedforward: &s.target_gain * &self.target,
                    noise_cov: s.input_cov.clone(),
                })
                .collect(),
        }
    }
}

/// Optimal policy for steering from `start` to `target` exactly; its noise
/// covariance is only positive semidefinite (singular at the last step).
pub fn point_to_point_policy(
    sys: &LinearSystemModel,
    start: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<AffineGaussianPolicy> {
    check_endpoints(sys, start, target)?;
    Ok(pinned_controller(sys, target)?.policy())
}

/// Mean path and covariance kernel of a pinned process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedMoments {
    /// `ℓ_k` for `k = 0..=N`.
    pub mean: Vec<DVector<f64>>,
    /// `kernel[k][s - k] = P̃(k, s)` for `k ≤ s`.
    pub kernel: Vec<Vec<DMatrix<f64>>>,
}

impl PinnedMoments {
    pub fn horizon(&self) -> usize {
        self.mean.len() - 1
    }

    /// `P̃(k, s) = Cov(x_k, x_s)`.
    pub fn cov(&self, k: usize, s: usize) -> DMatrix<f64> {
        if k <= s {
            self.kernel[k][s - k].clone()
        } else {
            self.kernel[s][k - s].transpose()
        }
    }

    pub fn marginal_cov(&self, k: usize) -> SymMatrix {
        SymMatrix::new(self.kernel[k][0].clone())
    }
}

/// Moments of the closed loop under the pinned controller:
/// `ℓ_{k+1} = Â_k ℓ_k + B_kB_kᵀΦ(N,k+1)ᵀG_r(N,k)^† x̄_N`,
/// `P̃(k+1,k+1) = Â_k P̃(k,k) Â_kᵀ + Λ_k`, `P̃(k,s) = P̃(k,k) Φ̂(s,k)ᵀ`.
pub fn pinned_moments_controller(
    sys: &LinearSystemModel,
    start: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<PinnedMoments> {
    check_endpoints(sys, start, target)?;
    let ctrl = pinned_controller(sys, target)?;
    let horizon = sys.horizon();
    let n = sys.state_dim();
    let mut mean = Vec::with_capacity(horizon + 1);
    let mut diag = Vec::with_capacity(horizon + 1);
    mean.push(start.clone());
    diag.push(SymMatrix::zeros(n));
    for (k, step) in ctrl.steps.iter().enumerate() {
        let next_mean = &step.closed_loop * &mean[k] + &step.state_target_gain * target;
        let next_cov = diag[k].congruence(&step.closed_loop).add(&step.state_noise);
        mean.push(next_mean);
        diag.push(next_cov);
    }
    let kernel = (0..=horizon)
        .map(|k| {
            let mut row = Vec::with_capacity(horizon + 1 - k);
            let mut cross = diag[k].as_matrix().clone();
            row.push(cross.clone());
            for s in k..horizon {
                cross = &cross * ctrl.steps[s].closed_loop.transpose();
                row.push(cross.clone());
            }
            row
        })
        .collect();
    Ok(PinnedMoments { mean, kernel })
}

/// Reference moments of the pinned process obtained by conditioning the
/// noise-driven chain `x_{k+1} = A_k x_k + B_k w_k`, `w_k ~ N(0, I)`, started
/// at `x̄₀`, on `x_N = x̄_N`. Each pair `(x_k, x_s)` is conditioned jointly
/// with `x_N` by a Schur complement. Accuracy is limited by the conditioning
/// of `G_r(N,0)`.
pub fn conditional_gaussian_oracle(
    sys: &LinearSystemModel,
    start: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<PinnedMoments> {
    check_endpoints(sys, start, target)?;
    let horizon = sys.horizon();
    let n = sys.state_dim();
    let free = sys.forward_transitions();
    let reach = sys.reachability_from_start();
    let free_mean: Vec<DVector<f64>> = free.iter().map(|phi| phi * start).collect();
    // Cov(x_k, x_s) = 𝖯_k Φ(s,k)ᵀ for k ≤ s.
    let cross = |k: usize, s: usize| -> DMatrix<f64> {
        let mut phi = DMatrix::identity(n, n);
        for j in k..s {
            phi = sys.a(j) * phi;
        }
        reach[k].as_matrix() * phi.transpose()
    };
    let cond = |k: usize, s: usize| -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>)> {
        let idx = [k, s, horizon];
        let mut joint = DMatrix::zeros(3 * n, 3 * n);
        let mut joint_mean = DVector::zeros(3 * n);
        for (bi, &i) in idx.iter().enumerate() {
            joint_mean.rows_mut(bi * n, n).copy_from(&free_mean[i]);
            for (bj, &j) in idx.iter().enumerate() {
                let block = if i <= j {
                    cross(i, j)
                } else {
                    cross(j, i).transpose()
                };
                joint.view_mut((bi * n, bj * n), (n, n)).copy_from(&block);
            }
        }
        let post = gaussian_condition(&SymMatrix::new(joint), &joint_mean, target).map_err(
            |e| match e {
                Error::SingularBlock => Error::SingularGramian("reachability"),
                other => other,
            },
        )?;
        let mean_k = post.mean.rows(0, n).into_owned();
        let mean_s = post.mean.rows(n, n).into_owned();
        let cov_ks = post.cov.view((0, n), (n, n)).into_owned();
        Ok((mean_k, mean_s, cov_ks))
    };
    let mut mean = vec![DVector::zeros(n); horizon + 1];
    let mut kernel = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let mut row = Vec::with_capacity(horizon + 1 - k);
        for s in k..=horizon {
            if s == horizon {
                // Conditioning fixes x_N exactly.
                row.push(DMatrix::zeros(n, n));
                if k == horizon {
                    mean[k] = target.clone();
                }
                continue;
            }
            let (mk, _, cks) = cond(k, s)?;
            if s == k {
                mean[k] = mk;
            }
            row.push(cks);
        }
        kernel.push(row);
    }
    Ok(PinnedMoments { mean, kernel })
}

/// `𝖰_k = G_c(N, k)` for `k = 0..=N`, with `𝖰_N = 0`.
pub fn controllability_to_terminal(sys: &LinearSystemModel) -> Result<Vec<SymMatrix>> {
    let horizon = sys.horizon();
    let mut out = (0..horizon)
        .map(|k| sys.controllability_gramian(horizon, k))
        .collect::<Result<Vec<_>>>()?;
    out.push(SymMatrix::zeros(sys.state_dim()));
    Ok(out)
}
