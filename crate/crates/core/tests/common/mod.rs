#![allow(dead_code)]

pub mod exact;

use maxent_steer::matrix::rcond_sym;
use maxent_steer::{
    validate_assumptions, validate_pinned, DMatrix, DVector, DensityBoundary, GaussianMarginal,
    LinearSystemModel, SymMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const SUITE_SIZE: usize = 200;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn example_system() -> LinearSystemModel {
    LinearSystemModel::time_invariant(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.05, 1.2]),
        DMatrix::from_row_slice(2, 1, &[0.0, 0.22]),
        50,
    )
    .unwrap()
}

pub fn example_boundary() -> DensityBoundary {
    DensityBoundary::new(
        GaussianMarginal::new(
            DVector::from_row_slice(&[-2.0, 4.0]),
            SymMatrix::from_row_slice(2, &[7.0, 3.0, 3.0, 5.0]),
        )
        .unwrap(),
        GaussianMarginal::new(
            DVector::from_row_slice(&[1.0, 0.0]),
            SymMatrix::identity(2).scale(0.3),
        )
        .unwrap(),
    )
    .unwrap()
}

pub fn example_start() -> DVector<f64> {
    DVector::from_row_slice(&[-2.0, 4.0])
}

pub fn example_target() -> DVector<f64> {
    DVector::from_row_slice(&[1.0, 0.0])
}

pub fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `L Lᵀ + 0.2 I` with standard-normal `L`.
pub fn random_cov(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    let l = randn(rng, n, n);
    SymMatrix::new(&l * l.transpose() + DMatrix::identity(n, n) * 0.2)
}

fn condition(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    sv.max() / sv.min()
}

/// Time-varying system with `A_k = I + 0.3 G` (condition ≤ 50) and standard-normal `B_k`.
pub fn random_system(
    rng: &mut ChaCha8Rng,
    max_dim: usize,
    max_horizon: usize,
) -> LinearSystemModel {
    let n = rng.random_range(1..=max_dim);
    let m = rng.random_range(1..=n);
    let horizon = rng.random_range(1..=max_horizon);
    let a = (0..horizon)
        .map(|_| loop {
            let a = DMatrix::identity(n, n) + randn(rng, n, n) * 0.3;
            if condition(&a) <= 50.0 {
                break a;
            }
        })
        .collect();
    let b = (0..horizon).map(|_| randn(rng, n, m)).collect();
    LinearSystemModel::new(a, b).unwrap()
}

/// Every tail Gramian `G_r(N,k)` is either structurally rank-deficient or
/// has reciprocal condition at least `1e-6`.
pub fn well_conditioned_tails(sys: &LinearSystemModel) -> bool {
    let (n, m, h) = (sys.state_dim(), sys.input_dim(), sys.horizon());
    sys.reachability_to_terminal()
        .iter()
        .enumerate()
        .take(h)
        .all(|(k, g)| (h - k) * m < n || rcond_sym(g) >= 1e-6)
}

pub struct DensityInstance {
    pub sys: LinearSystemModel,
    pub boundary: DensityBoundary,
    pub epsilon: f64,
}

/// Feasible density-steering instance: `n ≤ 3`, `N ≤ 10`, random means and
/// covariances, `ε` log-uniform on `[0.05, 5]`.
pub fn random_density_instance(rng: &mut ChaCha8Rng) -> DensityInstance {
    loop {
        let sys = random_system(rng, 3, 10);
        if !well_conditioned_tails(&sys) {
            continue;
        }
        let n = sys.state_dim();
        let boundary = DensityBoundary::new(
            GaussianMarginal::new(randn_vec(rng, n), random_cov(rng, n)).unwrap(),
            GaussianMarginal::new(randn_vec(rng, n), random_cov(rng, n)).unwrap(),
        )
        .unwrap();
        let epsilon = (rng.random_range((0.05_f64).ln()..(5.0_f64).ln())).exp();
        if validate_assumptions(&sys, &boundary, epsilon).feasible {
            return DensityInstance {
                sys,
                boundary,
                epsilon,
            };
        }
    }
}

pub fn density_suite(seed: u64) -> Vec<DensityInstance> {
    let mut rng = rng(seed);
    (0..SUITE_SIZE)
        .map(|_| random_density_instance(&mut rng))
        .collect()
}

pub struct PinnedInstance {
    pub sys: LinearSystemModel,
    pub start: DVector<f64>,
    pub target: DVector<f64>,
}

/// Instance meeting the pinned hypotheses with `n ≤ 3`, `N ≤ 8`.
pub fn random_pinned_instance(rng: &mut ChaCha8Rng) -> PinnedInstance {
    loop {
        let sys = random_system(rng, 3, 8);
        if !validate_pinned(&sys).feasible || !well_conditioned_tails(&sys) {
            continue;
        }
        let n = sys.state_dim();
        let (start, target) = (randn_vec(rng, n), randn_vec(rng, n));
        return PinnedInstance { sys, start, target };
    }
}

pub fn pinned_suite(seed: u64) -> Vec<PinnedInstance> {
    let mut rng = rng(seed);
    (0..SUITE_SIZE)
        .map(|_| random_pinned_instance(&mut rng))
        .collect()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.amax()
}
