use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SymMatrix;
use crate::system::LinearSystemModel;

/// One step of an affine Gaussian policy: `u ~ N(K x + c, R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStep {
    pub gain: DMatrix<f64>,
    pub feedforward: DVector<f64>,
    pub noise_cov: SymMatrix,
}

/// A time-varying affine Gaussian policy over a finite horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineGaussianPolicy {
    pub steps: Vec<PolicyStep>,
}

/// Mean and covariance of the state at one step of a closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMoments {
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
}

impl AffineGaussianPolicy {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, k: usize) -> &PolicyStep {
        &self.steps[k]
    }

    /// Mean input at state `x` and step `k`.
    pub fn mean_input(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let s = &self.steps[k];
        &s.gain * x + &s.feedforward
    }

    pub fn check_compatible(&self, sys: &LinearSystemModel) -> Result<()> {
        if self.horizon() != sys.horizon() {
            return Err(Error::DimensionMismatch(format!(
                "policy horizon {} vs system horizon {}",
                self.horizon(),
                sys.horizon()
            )));
        }
        let (n, m) = (sys.state_dim(), sys.input_dim());
        for (k, s) in self.steps.iter().enumerate() {
            if s.gain.shape() != (m, n) || s.feedforward.len() != m || s.noise_cov.dim() != m {
                return Err(Error::DimensionMismatch(format!(
                    "policy step {k} does not match a system with n = {n}, m = {m}"
                )));
            }
        }
        Ok(())
    }

    /// Closed-loop state matrix `A_k + B_k K_k`.
    pub fn closed_loop_matrix(&self, sys: &LinearSystemModel, k: usize) -> DMatrix<f64> {
        sys.a(k) + sys.b(k) * &self.steps[k].gain
    }

    /// Propagates the state mean and covariance through the closed loop:
    /// `μ' = (A + BK) μ + B c`, `Σ' = (A + BK) Σ (A + BK)ᵀ + B R Bᵀ`.
    pub fn propagate_moments(
        &self,
        sys: &LinearSystemModel,
        mean0: &DVector<f64>,
        cov0: &SymMatrix,
    ) -> Result<Vec<StateMoments>> {
        self.check_compatible(sys)?;
        let mut out = Vec::with_capacity(self.horizon() + 1);
        out.push(StateMoments {
            mean: mean0.clone(),
            cov: cov0.clone(),
        });
        for k in 0..self.horizon() {
            let acl = self.closed_loop_matrix(sys, k);
            let s = &self.steps[k];
            let prev = &out[k];
            let mean = &acl * &prev.mean + sys.b(k) * &s.feedforward;
            let cov = prev
                .cov
                .congruence(&acl)
                .add(&s.noise_cov.congruence(sys.b(k)));
            out.push(StateMoments { mean, cov });
        }
        Ok(out)
    }

    /// Expected entropy-regularized cost
    /// `E Σ_k (½‖u_k‖² − ε H(π_k(·|x_k)))` under the closed loop started from
    /// `N(mean0, cov0)`. Requires every noise covariance to be positive definite.
    pub fn expected_cost(
        &self,
        sys: &LinearSystemModel,
        mean0: &DVector<f64>,
        cov0: &SymMatrix,
        epsilon: f64,
    ) -> Result<f64> {
        let moments = self.propagate_moments(sys, mean0, cov0)?;
        let mut total = 0.0;
        for (k, s) in self.steps.iter().enumerate() {
            let st = &moments[k];
            let mean_u = &s.gain * &st.mean + &s.feedforward;
            let cov_u = st.cov.congruence(&s.gain).add(&s.noise_cov);
            let energy = 0.5 * (mean_u.norm_squared() + cov_u.trace());
            total += energy - epsilon * gaussian_entropy(&s.noise_cov)?;
        }
        Ok(total)
    }
}

/// Differential entropy of `N(·, cov)`: `½ log((2πe)^m det cov)`.
pub fn gaussian_entropy(cov: &SymMatrix) -> Result<f64> {
    let m = cov.dim() as f64;
    let chol = cov
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("policy noise covariance"))?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(0.5 * (m * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + logdet))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_of_standard_normal() {
        let h = gaussian_entropy(&SymMatrix::identity(1)).unwrap();
        assert!((h - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_noise_moments_follow_deterministic_recursion() {
        let sys = LinearSystemModel::time_invariant(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            2,
        )
        .unwrap();
        let step = PolicyStep {
            gain: DMatrix::from_element(1, 1, -1.0),
            feedforward: DVector::from_element(1, 0.5),
            noise_cov: SymMatrix::zeros(1),
        };
        let policy = AffineGaussianPolicy {
            steps: vec![step.clone(), step],
        };
        let m = policy
            .propagate_moments(&sys, &DVector::from_element(1, 1.0), &SymMatrix::zeros(1))
            .unwrap();
        // x1 = 2 - 1 + 0.5 = 1.5, x2 = 1.5 + 0.5 = 2.0
        assert_eq!(m[1].mean[0], 1.5);
        assert_eq!(m[2].mean[0], 2.0);
        assert_eq!(m[2].cov[(0, 0)], 0.0);
    }

    #[test]
    fn incompatible_policy_is_rejected() {
        let sys =
            LinearSystemModel::time_invariant(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), 1)
                .unwrap();
        let policy = AffineGaussianPolicy {
            steps: vec![PolicyStep {
                gain: DMatrix::zeros(1, 3),
                feedforward: DVector::zeros(1),
                noise_cov: SymMatrix::identity(1),
            }],
        };
        assert!(matches!(
            policy.check_compatible(&sys),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
