//! Dense symmetric-matrix kernels used throughout the solvers.
//!
//! Everything here works on `nalgebra` dynamic matrices. Symmetric results are
//! re-symmetrized after each computation so that long recursions do not drift.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianMarginal;

/// Relative eigenvalue tolerance for definiteness decisions.
pub const DEFINITENESS_TOL: f64 = 1e-10;

/// Singular values below `PINV_RTOL * sigma_max` are treated as zero.
pub const PINV_RTOL: f64 = 1e-12;

/// Eigenvalues with magnitude below this fraction of the spectral scale are
/// treated as exact zeros by the square-root kernels.
pub const ROUNDOFF_RTOL: f64 = 1e-12;

/// Reciprocal condition number below which a matrix counts as singular.
pub const RCOND_TOL: f64 = 1e-12;

/// A real symmetric matrix.
///
/// Construction always symmetrizes the input as `(M + Mᵀ)/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DMatrix<f64>", from = "DMatrix<f64>")]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "SymMatrix requires a square matrix");
        let t = m.transpose();
        Self((m + t) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn from_row_slice(n: usize, data: &[f64]) -> Self {
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// `X · self · Xᵀ`, symmetrized.
    pub fn congruence(&self, x: &DMatrix<f64>) -> SymMatrix {
        SymMatrix::new(x * &self.0 * x.transpose())
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &other.0)
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn max_asymmetry(&self) -> f64 {
        max_abs(&(&self.0 - self.0.transpose()))
    }

    /// Inverse through an LU factorization, `None` when the reciprocal
    /// condition number falls below [`RCOND_TOL`].
    pub fn try_inverse(&self) -> Option<SymMatrix> {
        if rcond_sym(self) <= RCOND_TOL {
            return None;
        }
        self.0.clone().lu().try_inverse().map(SymMatrix::new)
    }

    /// Inverse of a positive-definite matrix through Cholesky.
    pub fn pd_inverse(&self) -> Option<SymMatrix> {
        self.0
            .clone()
            .cholesky()
            .map(|c| SymMatrix::new(c.inverse()))
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl From<SymMatrix> for DMatrix<f64> {
    fn from(s: SymMatrix) -> Self {
        s.0
    }
}

impl From<DMatrix<f64>> for SymMatrix {
    fn from(m: DMatrix<f64>) -> Self {
        SymMatrix::new(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    PositiveDefinite,
    PositiveSemidefinite,
    Indefinite,
    NegativeDefinite,
    /// Negative semidefinite with at least one zero eigenvalue.
    NegativeSemidefinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefinitenessReport {
    pub min_eig: f64,
    pub max_eig: f64,
    pub verdict: Verdict,
}

impl DefinitenessReport {
    pub fn is_pd(&self) -> bool {
        self.verdict == Verdict::PositiveDefinite
    }

    pub fn is_psd(&self) -> bool {
        matches!(
            self.verdict,
            Verdict::PositiveDefinite | Verdict::PositiveSemidefinite
        )
    }
}

/// Classifies `m` by the signs of its extreme eigenvalues.
///
/// Eigenvalues within `1e-10 · max(1, spectral radius)` of zero count as zero.
pub fn definiteness(m: &SymMatrix) -> DefinitenessReport {
    let ev = m.eigenvalues();
    let (min_eig, max_eig) = match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => (0.0, 0.0),
    };
    let tol = DEFINITENESS_TOL * max_eig.abs().max(min_eig.abs()).max(1.0);
    let verdict = if min_eig > tol {
        Verdict::PositiveDefinite
    } else if min_eig >= -tol {
        Verdict::PositiveSemidefinite
    } else if max_eig < -tol {
        Verdict::NegativeDefinite
    } else if max_eig <= tol {
        Verdict::NegativeSemidefinite
    } else {
        Verdict::Indefinite
    };
    DefinitenessReport {
        min_eig,
        max_eig,
        verdict,
    }
}

/// Applies `f` to the eigenvalues of a symmetric matrix: `V f(Λ) Vᵀ`.
fn spectral_map(m: &SymMatrix, f: impl Fn(f64) -> f64) -> SymMatrix {
    let eig = SymmetricEigen::new(m.as_matrix().clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    SymMatrix::new(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Spectral radius of a symmetric matrix given its eigenvalues.
fn spectral_scale(ev: &[f64]) -> f64 {
    ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn check_psd(m: &SymMatrix) -> Result<f64> {
    let ev = m.eigenvalues();
    let scale = spectral_scale(&ev);
    let min_eig = ev.first().copied().unwrap_or(0.0);
    if min_eig < -DEFINITENESS_TOL * scale {
        return Err(Error::IndefiniteInput { min_eig });
    }
    Ok(scale)
}

/// Unique positive-semidefinite square root.
///
/// `scale` is the spectral radius. Eigenvalues in `[-1e-10·scale, 0)` are
/// round-off and clamp to zero; more negative eigenvalues are an error.
/// Eigenvalues below `1e-12·scale` are taken as exact zeros so that singular
/// covariances keep their null space.
pub fn psd_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let scale = check_psd(m)?;
    let floor = ROUNDOFF_RTOL * scale;
    Ok(spectral_map(m, |l| if l <= floor { 0.0 } else { l.sqrt() }))
}

/// Inverse square root of a positive-definite matrix.
pub fn pd_inv_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let ev = m.eigenvalues();
    let scale = spectral_scale(&ev);
    if scale == 0.0 || ev.first().copied().unwrap_or(0.0) <= RCOND_TOL * scale {
        return Err(Error::NotPositiveDefinite("matrix"));
    }
    Ok(spectral_map(m, |l| 1.0 / l.sqrt()))
}

/// Moore–Penrose pseudoinverse through the SVD.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(c, r);
    }
    let cutoff = PINV_RTOL * smax;
    let u = svd.u.expect("svd computed with u");
    let vt = svd.v_t.expect("svd computed with v_t");
    let sinv =
        DMatrix::from_diagonal(
            &svd.singular_values
                .map(|s| if s > cutoff { 1.0 / s } else { 0.0 }),
        );
    vt.transpose() * sinv * u.transpose()
}

/// Symmetric pseudoinverse (the pseudoinverse of a symmetric matrix is symmetric).
pub fn pinv_sym(m: &SymMatrix) -> SymMatrix {
    SymMatrix::new(pinv(m.as_matrix()))
}

/// Gaussian conditioning by the Schur complement.
///
/// The joint vector is partitioned as `(x_a, x_b)` with `x_a` holding the first
/// `joint_mean.len() - observed_b.len()` coordinates. Returns the law of `x_a`
/// given `x_b = observed_b`.
pub fn gaussian_condition(
    joint_cov: &SymMatrix,
    joint_mean: &DVector<f64>,
    observed_b: &DVector<f64>,
) -> Result<GaussianMarginal> {
    let n = joint_cov.dim();
    if joint_mean.len() != n || observed_b.len() > n {
        return Err(Error::DimensionMismatch(format!(
            "joint covariance {n}x{n}, mean {}, observation {}",
            joint_mean.len(),
            observed_b.len()
        )));
    }
    let nb = observed_b.len();
    let na = n - nb;
    let s_aa = joint_cov.view((0, 0), (na, na));
    let s_ab = joint_cov.view((0, na), (na, nb));
    let s_bb = SymMatrix::new(joint_cov.view((na, na), (nb, nb)).into_owned());
    if nb > 0 && rcond_sym(&s_bb) <= RCOND_TOL {
        return Err(Error::SingularBlock);
    }
    let lu = s_bb.as_matrix().clone().lu();
    let innovation = observed_b - joint_mean.rows(na, nb);
    let gain_t = lu.solve(&s_ab.transpose()).ok_or(Error::SingularBlock)?;
    let mean = joint_mean.rows(0, na) + gain_t.transpose() * innovation;
    let cov = SymMatrix::new(s_aa - s_ab * gain_t);
    Ok(GaussianMarginal { mean, cov })
}

/// Reciprocal condition number `|λ|_min / |λ|_max` of a symmetric matrix.
pub fn rcond_sym(m: &SymMatrix) -> f64 {
    if m.dim() == 0 {
        return 1.0;
    }
    let ev = m.eigenvalues();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| {
        (lo.min(v.abs()), hi.max(v.abs()))
    });
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

/// Reciprocal 2-norm condition number of a general square matrix.
pub fn rcond(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let hi = sv.max();
    if hi == 0.0 {
        0.0
    } else {
        sv.min() / hi
    }
}

/// Smallest singular value.
pub fn min_singular(m: &DMatrix<f64>) -> f64 {
    m.singular_values().min()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Inverse of a general square matrix, rejecting near-singular input.
pub fn checked_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if rcond(m) <= RCOND_TOL {
        return None;
    }
    m.clone().lu().try_inverse()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        let l = randn(rng, n, n);
        SymMatrix::new(&l * l.transpose() + DMatrix::identity(n, n) * 0.5)
    }

    fn frob(m: &DMatrix<f64>) -> f64 {
        m.norm()
    }

    #[test]
    fn symmetrizes_on_construction() {
        let s = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 3.0]));
        assert_eq!(s[(0, 1)], 3.0);
        assert_eq!(s[(1, 0)], 3.0);
        assert_eq!(s.max_asymmetry(), 0.0);
    }

    #[test]
    fn psd_sqrt_identity_and_diagonal() {
        let i2 = SymMatrix::identity(2);
        assert!(max_abs(&(psd_sqrt(&i2).unwrap().into_matrix() - DMatrix::identity(2, 2))) < 1e-14);
        let d = SymMatrix::from_diagonal(&[4.0, 9.0]);
        let s = psd_sqrt(&d).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert!(max_abs(&(s.into_matrix() - want)) < 1e-14);
    }

    #[test]
    fn psd_sqrt_random_spd_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = random_spd(&mut rng, 4);
            let s = psd_sqrt(&m).unwrap();
            let resid = frob(&(s.as_matrix() * s.as_matrix() - m.as_matrix()));
            assert!(resid <= 1e-10 * (1.0 + frob(&m)), "residual {resid}");
            assert!(definiteness(&s).is_psd());
        }
    }

    #[test]
    fn psd_sqrt_clamps_roundoff_and_rejects_indefinite() {
        let tiny = SymMatrix::from_diagonal(&[1.0, -1e-13]);
        let s = psd_sqrt(&tiny).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
        let bad = SymMatrix::from_diagonal(&[1.0, -1e-3]);
        assert!(matches!(psd_sqrt(&bad), Err(Error::IndefiniteInput { .. })));
    }

    #[test]
    fn pinv_examples() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.0]));
        assert!(max_abs(&(pinv(&d) - want)) < 1e-15);
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!(max_abs(&(pinv(&i3) - &i3)) < 1e-15);
        assert_eq!(pinv(&DMatrix::zeros(2, 3)), DMatrix::<f64>::zeros(3, 2));
    }

    #[test]
    fn pinv_penrose_identities_on_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            // rank-2 4x3
            let m = randn(&mut rng, 4, 2) * randn(&mut rng, 2, 3);
            let x = pinv(&m);
            let scale = 1.0 + frob(&m) * frob(&x);
            assert!(frob(&(&m * &x * &m - &m)) <= 1e-10 * scale * frob(&m));
            assert!(frob(&(&x * &m * &x - &x)) <= 1e-10 * scale * frob(&x));
            let mx = &m * &x;
            let xm = &x * &m;
            assert!(frob(&(mx.transpose() - &mx)) <= 1e-10 * scale);
            assert!(frob(&(xm.transpose() - &xm)) <= 1e-10 * scale);
        }
    }

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = randn(&mut rng, 3, 3) + DMatrix::identity(3, 3) * 3.0;
        let inv = m.clone().try_inverse().unwrap();
        assert!(max_abs(&(pinv(&m) - &inv)) <= 1e-10 * max_abs(&inv));
    }

    #[test]
    fn definiteness_verdicts() {
        let r = definiteness(&SymMatrix::identity(2));
        assert_eq!(r.verdict, Verdict::PositiveDefinite);
        assert_eq!(r.min_eig, 1.0);
        assert_eq!(
            definiteness(&SymMatrix::from_diagonal(&[1.0, 0.0])).verdict,
            Verdict::PositiveSemidefinite
        );
        assert_eq!(
            definiteness(&SymMatrix::from_diagonal(&[1.0, -1.0])).verdict,
            Verdict::Indefinite
        );
        assert_eq!(
            definiteness(&SymMatrix::from_diagonal(&[-1.0, -2.0])).verdict,
            Verdict::NegativeDefinite
        );
    }

    #[test]
    fn conditioning_independent_blocks_returns_marginal() {
        let joint = SymMatrix::from_diagonal(&[2.0, 3.0, 5.0]);
        let mean = DVector::from_vec(vec![1.0, -1.0, 4.0]);
        let obs = DVector::from_vec(vec![10.0]);
        let g = gaussian_condition(&joint, &mean, &obs).unwrap();
        assert_eq!(g.mean.as_slice(), &[1.0, -1.0]);
        assert_eq!(
            g.cov.as_matrix(),
            SymMatrix::from_diagonal(&[2.0, 3.0]).as_matrix()
        );
    }

    #[test]
    fn conditioning_scalar_textbook_case() {
        let joint = SymMatrix::from_row_slice(2, &[1.0, 0.5, 0.5, 1.0]);
        let g =
            gaussian_condition(&joint, &DVector::zeros(2), &DVector::from_vec(vec![1.0])).unwrap();
        assert!((g.mean[0] - 0.5).abs() < 1e-15);
        assert!((g.cov[(0, 0)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn conditioning_singular_block_errors() {
        let joint = SymMatrix::from_diagonal(&[1.0, 0.0]);
        let r = gaussian_condition(&joint, &DVector::zeros(2), &DVector::zeros(1));
        assert_eq!(r.unwrap_err(), Error::SingularBlock);
    }

    /// Monte-Carlo oracle: regress x_a on x_b from joint samples and compare
    /// the implied conditional mean and residual covariance.
    #[test]
    fn conditioning_matches_sample_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let joint = random_spd(&mut rng, 4);
        let mu = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        let obs = DVector::from_vec(vec![1.5, 0.0]);
        let exact = gaussian_condition(&joint, &mu, &obs).unwrap();

        let l = joint.as_matrix().clone().cholesky().unwrap().l();
        let count = 1_000_000usize;
        // Accumulate the moments needed for the least-squares regression of
        // x_a on [1, x_b].
        let mut xtx = DMatrix::<f64>::zeros(3, 3);
        let mut xty = DMatrix::<f64>::zeros(3, 2);
        let mut samples_a = Vec::with_capacity(count);
        let mut samples_b = Vec::with_capacity(count);
        for _ in 0..count {
            let z = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &mu + &l * z;
            let reg = DVector::from_vec(vec![1.0, x[2], x[3]]);
            let ya = DVector::from_vec(vec![x[0], x[1]]);
            xtx += &reg * reg.transpose();
            xty += &reg * ya.transpose();
            samples_a.push(ya);
            samples_b.push(reg);
        }
        let coef = xtx.clone().lu().solve(&xty).unwrap();
        let mut resid_cov = DMatrix::<f64>::zeros(2, 2);
        for (ya, reg) in samples_a.iter().zip(&samples_b) {
            let r = ya - coef.transpose() * reg;
            resid_cov += &r * r.transpose();
        }
        resid_cov /= (count - 3) as f64;
        let query = DVector::from_vec(vec![1.0, obs[0], obs[1]]);
        let est_mean = coef.transpose() * query;

        // Standard error of the regression prediction at the query point.
        let xtx_inv = xtx.try_inverse().unwrap();
        let q = DVector::from_vec(vec![1.0, obs[0], obs[1]]);
        let lever = (q.transpose() * &xtx_inv * &q)[(0, 0)];
        for i in 0..2 {
            let se = (exact.cov[(i, i)] * lever).sqrt();
            assert!(
                (est_mean[i] - exact.mean[i]).abs() <= 3.0 * se,
                "mean {i}: {} vs {} (se {se})",
                est_mean[i],
                exact.mean[i]
            );
            for j in 0..2 {
                let s = exact.cov[(i, j)];
                let se_cov =
                    ((exact.cov[(i, i)] * exact.cov[(j, j)] + s * s) / count as f64).sqrt();
                assert!(
                    (resid_cov[(i, j)] - s).abs() <= 3.0 * se_cov,
                    "cov ({i},{j}): {} vs {s}",
                    resid_cov[(i, j)]
                );
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn spd_strategy(n: usize) -> impl Strategy<Value = SymMatrix> {
            prop::collection::vec(-2.0f64..2.0, n * n).prop_map(move |v| {
                let l = DMatrix::from_row_slice(n, n, &v);
                SymMatrix::new(&l * l.transpose() + DMatrix::identity(n, n) * 0.1)
            })
        }

        proptest! {
            #[test]
            fn sqrt_reconstructs(m in spd_strategy(3)) {
                let s = psd_sqrt(&m).unwrap();
                let r = (s.as_matrix() * s.as_matrix() - m.as_matrix()).norm();
                prop_assert!(r <= 1e-10 * (1.0 + m.norm()));
            }

            #[test]
            fn conditional_cov_ignores_observation(
                m in spd_strategy(4),
                obs in prop::collection::vec(-10.0f64..10.0, 2),
            ) {
                let mean = DVector::zeros(4);
                let a = gaussian_condition(&m, &mean, &DVector::from_vec(obs)).unwrap();
                let b = gaussian_condition(&m, &mean, &DVector::zeros(2)).unwrap();
                prop_assert!(max_abs(&(a.cov.into_matrix() - b.cov.into_matrix())) <= 1e-12 * (1.0 + max_abs(&m)));
            }
        }
    }
}
