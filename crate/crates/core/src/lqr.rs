//! Entropy-regularized LQR with a quadratic terminal cost.
//!
//! The optimal policy is the LQ feedback law perturbed by Gaussian exploration
//! noise whose covariance is `ε (I + BᵀΠB)⁻¹`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{definiteness, max_abs, DefinitenessReport, SymMatrix};
use crate::policy::{AffineGaussianPolicy, PolicyStep};
use crate::system::LinearSystemModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    /// `Π_0, …, Π_N` with `Π_N = F`.
    pub pi: Vec<SymMatrix>,
    /// Gate matrices `I + B_kᵀ Π_{k+1} B_k` for `k = 0..N`.
    pub gates: Vec<SymMatrix>,
    pub gate_reports: Vec<DefinitenessReport>,
}

/// Backward Riccati recursion
/// `Π_k = A_kᵀΠ_{k+1}A_k − A_kᵀΠ_{k+1}B_k (I + B_kᵀΠ_{k+1}B_k)⁻¹ B_kᵀΠ_{k+1}A_k`, `Π_N = F`.
///
/// Fails with [`Error::GateNotPd`] at the first step whose gate is not
/// positive definite.
pub fn riccati_backward(
    sys: &LinearSystemModel,
    terminal_weight: &SymMatrix,
) -> Result<RiccatiSolution> {
    let horizon = sys.horizon();
    let n = sys.state_dim();
    let m = sys.input_dim();
    if terminal_weight.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "terminal weight is {0}x{0}, state dimension is {n}",
            terminal_weight.dim()
        )));
    }
    let mut pi = vec![SymMatrix::zeros(n); horizon + 1];
    let mut gates = vec![SymMatrix::zeros(m); horizon];
    let mut reports = Vec::with_capacity(horizon);
    pi[horizon] = terminal_weight.clone();
    for k in (0..horizon).rev() {
        let (a, b) = (sys.a(k), sys.b(k));
        let next = pi[k + 1].as_matrix();
        let gate = SymMatrix::new(DMatrix::identity(m, m) + b.transpose() * next * b);
        let report = definiteness(&gate);
        if !report.is_pd() {
            return Err(Error::GateNotPd { step: k });
        }
        let chol = gate
            .as_matrix()
            .clone()
            .cholesky()
            .ok_or(Error::GateNotPd { step: k })?;
        let bt_pi_a = b.transpose() * next * a;
        let correction = bt_pi_a.transpose() * chol.solve(&bt_pi_a);
        pi[k] = SymMatrix::new(a.transpose() * next * a - correction);
        gates[k] = gate;
        reports.push(report);
    }
    reports.reverse();
    Ok(RiccatiSolution {
        pi,
        gates,
        gate_reports: reports,
    })
}

impl RiccatiSolution {
    pub fn horizon(&self) -> usize {
        self.gates.len()
    }

    /// Max-abs residual of the Riccati step `k`, evaluated with a plain
    /// LU inverse of the gate, relative to `1 + max|Π_k|`.
    pub fn residual(&self, sys: &LinearSystemModel, k: usize) -> f64 {
        let (a, b) = (sys.a(k), sys.b(k));
        let next = self.pi[k + 1].as_matrix();
        let gate_inv = self.gates[k]
            .as_matrix()
            .clone()
            .try_inverse()
            .unwrap_or_else(|| DMatrix::from_element(b.ncols(), b.ncols(), f64::NAN));
        let rhs = a.transpose() * next * a
            - a.transpose() * next * b * gate_inv * b.transpose() * next * a;
        max_abs(&(self.pi[k].as_matrix() - rhs)) / (1.0 + max_abs(self.pi[k].as_matrix()))
    }

    pub fn max_residual(&self, sys: &LinearSystemModel) -> f64 {
        (0..self.horizon())
            .map(|k| self.residual(sys, k))
            .fold(0.0, f64::max)
    }

    /// Additive constants of the soft value function,
    /// `V(k, x) = ½ (x − Φ(k,N)x̄_N)ᵀ Π_k (x − Φ(k,N)x̄_N) + v_k`, with `v_N = 0` and
    /// `v_k = v_{k+1} − (ε/2) log((2π)^m det(ε (I + B_kᵀΠ_{k+1}B_k)⁻¹))`.
    pub fn value_constants(&self, epsilon: f64) -> Vec<f64> {
        let horizon = self.horizon();
        let mut v = vec![0.0; horizon + 1];
        for k in (0..horizon).rev() {
            let m = self.gates[k].dim() as f64;
            let logdet_gate: f64 = self.gates[k].eigenvalues().iter().map(|l| l.ln()).sum();
            let logdet = m * epsilon.ln() - logdet_gate;
            v[k] = v[k + 1] - 0.5 * epsilon * (m * (2.0 * std::f64::consts::PI).ln() + logdet);
        }
        v
    }
}

/// Policy `u ~ N(K_k (x − Φ(k,N) x̄_N), ε (I + B_kᵀΠ_{k+1}B_k)⁻¹)` with
/// `K_k = −(I + B_kᵀΠ_{k+1}B_k)⁻¹ B_kᵀΠ_{k+1}A_k`.
///
/// A nonzero target needs every `A_k` invertible to form `Φ(k, N)`.
pub fn lqr_policy(
    sys: &LinearSystemModel,
    ric: &RiccatiSolution,
    target: &DVector<f64>,
    epsilon: f64,
) -> Result<AffineGaussianPolicy> {
    if epsilon <= 0.0 {
        return Err(Error::NonpositiveEpsilon(epsilon));
    }
    let horizon = sys.horizon();
    let n = sys.state_dim();
    if target.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "target has length {}, state dimension is {n}",
            target.len()
        )));
    }
    // Φ(k, N) x̄_N, pulled back one step at a time.
    let mut pulled = vec![DVector::zeros(n); horizon + 1];
    if target.iter().any(|v| *v != 0.0) {
        pulled[horizon] = target.clone();
        for k in (0..horizon).rev() {
            pulled[k] = sys.a_inverse(k)? * &pulled[k + 1];
        }
    }
    let steps = (0..horizon)
        .map(|k| {
            let (a, b) = (sys.a(k), sys.b(k));
            let gate = ric.gates[k]
                .as_matrix()
                .clone()
                .cholesky()
                .ok_or(Error::GateNotPd { step: k })?;
            let gain = -gate.solve(&(b.transpose() * ric.pi[k + 1].as_matrix() * a));
            let feedforward = -(&gain * &pulled[k]);
            let noise_cov = SymMatrix::new(gate.inverse() * epsilon);
            Ok(PolicyStep {
                gain,
                feedforward,
                noise_cov,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AffineGaussianPolicy { steps })
}

/// An entropy-regularized LQR problem rescaled to unit temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLqr {
    /// Dynamics with `B_k ↦ √ε B_k`.
    pub system: LinearSystemModel,
    /// `F / ε`.
    pub terminal_weight: SymMatrix,
    /// The original temperature.
    pub epsilon: f64,
}

/// Rewrites the problem with temperature `ε` as an equivalent one with unit
/// temperature, by the input substitution `u = √ε u'`.
pub fn epsilon_normalize(
    sys: &LinearSystemModel,
    terminal_weight: &SymMatrix,
    epsilon: f64,
) -> Result<NormalizedLqr> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::NonpositiveEpsilon(epsilon));
    }
    Ok(NormalizedLqr {
        system: sys.with_scaled_input(epsilon.sqrt()),
        terminal_weight: terminal_weight.scale(1.0 / epsilon),
        epsilon,
    })
}

/// Maps a unit-temperature policy back to the original input scale
/// (`K = √ε K'`, `c = √ε c'`, `R = ε R'`). The closed-loop state law is unchanged.
pub fn denormalize_policy(policy: &AffineGaussianPolicy, epsilon: f64) -> AffineGaussianPolicy {
    let s = epsilon.sqrt();
    AffineGaussianPolicy {
        steps: policy
            .steps
            .iter()
            .map(|p| PolicyStep {
                gain: &p.gain * s,
                feedforward: &p.feedforward * s,
                noise_cov: p.noise_cov.scale(epsilon),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar(a: f64, b: f64, horizon: usize) -> LinearSystemModel {
        LinearSystemModel::time_invariant(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            horizon,
        )
        .unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal))
    }

    fn random_system(rng: &mut ChaCha8Rng) -> LinearSystemModel {
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=3);
        let horizon = rng.random_range(1..=6);
        let a = (0..horizon)
            .map(|_| DMatrix::identity(n, n) + randn(rng, n, n, 0.3))
            .collect();
        let b = (0..horizon).map(|_| randn(rng, n, m, 1.0)).collect();
        LinearSystemModel::new(a, b).unwrap()
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        let l = randn(rng, n, n, 1.0);
        SymMatrix::new(&l * l.transpose())
    }

    #[test]
    fn scalar_one_step_hand_values() {
        let sys = scalar(1.0, 1.0, 1);
        let ric = riccati_backward(&sys, &SymMatrix::identity(1)).unwrap();
        assert_eq!(ric.pi[1][(0, 0)], 1.0);
        assert!((ric.pi[0][(0, 0)] - 0.5).abs() < 1e-15);
        let pol = lqr_policy(&sys, &ric, &DVector::zeros(1), 1.0).unwrap();
        assert!((pol.steps[0].gain[(0, 0)] + 0.5).abs() < 1e-15);
        assert!((pol.steps[0].noise_cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_terminal_weight_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = random_system(&mut rng);
        let n = sys.state_dim();
        let ric = riccati_backward(&sys, &SymMatrix::zeros(n)).unwrap();
        assert!(ric.pi.iter().all(|p| max_abs(p.as_matrix()) == 0.0));
        let eps = 0.7;
        let pol = lqr_policy(&sys, &ric, &DVector::zeros(n), eps).unwrap();
        for s in &pol.steps {
            assert_eq!(max_abs(&s.gain), 0.0);
            let want = DMatrix::identity(sys.input_dim(), sys.input_dim()) * eps;
            assert!(max_abs(&(s.noise_cov.as_matrix() - want)) < 1e-15);
        }
    }

    #[test]
    fn psd_terminal_weight_keeps_solution_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let sys = random_system(&mut rng);
            let f = random_psd(&mut rng, sys.state_dim());
            let ric = riccati_backward(&sys, &f).unwrap();
            for p in &ric.pi {
                let min = p.eigenvalues()[0];
                assert!(
                    min >= -1e-10 * (1.0 + max_abs(p.as_matrix())),
                    "min eig {min}"
                );
            }
            assert!(ric.max_residual(&sys) <= 1e-10);
            assert!(ric.gate_reports.iter().all(|r| r.is_pd()));
        }
    }

    #[test]
    fn indefinite_weight_can_break_the_gate() {
        let sys = scalar(1.0, 1.0, 1);
        let err = riccati_backward(&sys, &SymMatrix::from_diagonal(&[-2.0])).unwrap_err();
        assert_eq!(err, Error::GateNotPd { step: 0 });
    }

    #[test]
    fn gain_is_temperature_invariant_and_noise_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sys = random_system(&mut rng);
        let f = random_psd(&mut rng, sys.state_dim());
        let ric = riccati_backward(&sys, &f).unwrap();
        let zero = DVector::zeros(sys.state_dim());
        let p1 = lqr_policy(&sys, &ric, &zero, 1.0).unwrap();
        let p3 = lqr_policy(&sys, &ric, &zero, 3.0).unwrap();
        for (a, b) in p1.steps.iter().zip(&p3.steps) {
            assert_eq!(a.gain, b.gain);
            assert!(max_abs(&(a.noise_cov.as_matrix() * 3.0 - b.noise_cov.as_matrix())) < 1e-14);
        }
    }

    #[test]
    fn value_constants_vanish_at_terminal() {
        let sys = scalar(1.0, 1.0, 1);
        let ric = riccati_backward(&sys, &SymMatrix::identity(1)).unwrap();
        let v = ric.value_constants(1.0);
        assert_eq!(v[1], 0.0);
        // -½ log(2π · ½)
        assert!((v[0] + 0.5 * (std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn nonzero_target_needs_invertible_a() {
        let sys = scalar(0.0, 1.0, 2);
        let ric = riccati_backward(&sys, &SymMatrix::identity(1)).unwrap();
        assert!(lqr_policy(&sys, &ric, &DVector::zeros(1), 1.0).is_ok());
        assert!(matches!(
            lqr_policy(&sys, &ric, &DVector::from_element(1, 1.0), 1.0),
            Err(Error::SingularA { .. })
        ));
    }

    #[test]
    fn normalization_examples() {
        let sys = scalar(1.0, 1.0, 2);
        let f = SymMatrix::from_diagonal(&[2.0]);
        let same = epsilon_normalize(&sys, &f, 1.0).unwrap();
        assert_eq!(same.system, sys);
        assert_eq!(same.terminal_weight, f);
        let four = epsilon_normalize(&sys, &f, 4.0).unwrap();
        assert_eq!(four.system.b(0)[(0, 0)], 2.0);
        assert_eq!(four.terminal_weight[(0, 0)], 0.5);
        assert_eq!(
            epsilon_normalize(&sys, &f, 0.0).unwrap_err(),
            Error::NonpositiveEpsilon(0.0)
        );
    }

    #[test]
    fn normalized_round_trip_matches_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for eps in [0.02, 0.5, 4.0] {
            let sys = random_system(&mut rng);
            let n = sys.state_dim();
            let f = random_psd(&mut rng, n);
            let target = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let direct =
                lqr_policy(&sys, &riccati_backward(&sys, &f).unwrap(), &target, eps).unwrap();
            let norm = epsilon_normalize(&sys, &f, eps).unwrap();
            let ric = riccati_backward(&norm.system, &norm.terminal_weight).unwrap();
            let back =
                denormalize_policy(&lqr_policy(&norm.system, &ric, &target, 1.0).unwrap(), eps);
            for (d, r) in direct.steps.iter().zip(&back.steps) {
                assert!(max_abs(&(&d.gain - &r.gain)) <= 1e-10 * (1.0 + max_abs(&d.gain)));
                assert!(
                    (&d.feedforward - &r.feedforward).amax()
                        <= 1e-10 * (1.0 + d.feedforward.amax())
                );
                assert!(max_abs(&(d.noise_cov.as_matrix() - r.noise_cov.as_matrix())) <= 1e-10);
            }
        }
    }

    /// With `F ≻ 0` and a zero target the mean trajectory of the optimal
    /// policy minimizes the deterministic LQ cost; random gain perturbations
    /// never do better.
    #[test]
    fn mean_trajectory_beats_perturbed_feedback() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let sys = random_system(&mut rng);
            let n = sys.state_dim();
            let f = SymMatrix::new(random_psd(&mut rng, n).into_matrix() + DMatrix::identity(n, n));
            let ric = riccati_backward(&sys, &f).unwrap();
            let pol = lqr_policy(&sys, &ric, &DVector::zeros(n), 1.0).unwrap();
            let x0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let cost = |gains: &[DMatrix<f64>]| {
                let mut x = x0.clone();
                let mut c = 0.0;
                for (k, g) in gains.iter().enumerate() {
                    let u = g * &x;
                    c += 0.5 * u.norm_squared();
                    x = sys.a(k) * &x + sys.b(k) * u;
                }
                c + 0.5 * (x.transpose() * f.as_matrix() * &x)[(0, 0)]
            };
            let gains: Vec<_> = pol.steps.iter().map(|s| s.gain.clone()).collect();
            let best = cost(&gains);
            // Optimal cost from x0 equals ½ x0ᵀ Π_0 x0.
            let predicted = 0.5 * (x0.transpose() * ric.pi[0].as_matrix() * &x0)[(0, 0)];
            assert!((best - predicted).abs() <= 1e-9 * (1.0 + predicted.abs()));
            for _ in 0..100 {
                let perturbed: Vec<_> = gains
                    .iter()
                    .map(|g| g + randn(&mut rng, g.nrows(), g.ncols(), 0.1))
                    .collect();
                assert!(cost(&perturbed) >= best - 1e-12);
            }
        }
    }
}
