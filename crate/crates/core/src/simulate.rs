//! Monte-Carlo execution of affine Gaussian policies.
//!
//! Sample `i` draws from its own ChaCha stream (`seed`, stream `i`), so an
//! ensemble does not depend on how the samples are scheduled across threads.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianMarginal;
use crate::matrix::{psd_sqrt, SymMatrix};
use crate::policy::AffineGaussianPolicy;
use crate::system::LinearSystemModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialState {
    Gaussian(GaussianMarginal),
    Point(DVector<f64>),
}

impl InitialState {
    pub fn dim(&self) -> usize {
        match self {
            InitialState::Gaussian(g) => g.dim(),
            InitialState::Point(p) => p.len(),
        }
    }
}

/// Sampled closed-loop paths. `states[i][k]` is `x_k` of sample `i`
/// (`k = 0..=N`) and `controls[i][k]` is `u_k` (`k = 0..N`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnsemble {
    pub states: Vec<Vec<DVector<f64>>>,
    pub controls: Vec<Vec<DVector<f64>>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub mean: DVector<f64>,
    /// Unbiased sample covariance; zero when `cov_defined` is false.
    pub cov: SymMatrix,
    /// False for single-sample ensembles.
    pub cov_defined: bool,
}

impl TrajectoryEnsemble {
    pub fn sample_count(&self) -> usize {
        self.states.len()
    }

    pub fn horizon(&self) -> usize {
        self.controls.first().map_or(0, Vec::len)
    }

    pub fn state_dim(&self) -> usize {
        self.states[0][0].len()
    }
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Draws `count` independent closed-loop paths `x_{k+1} = A_k x_k + B_k u_k`,
/// `u_k ~ N(K_k x_k + c_k, R_k)`.
pub fn sample_ensemble(
    sys: &LinearSystemModel,
    policy: &AffineGaussianPolicy,
    initial: &InitialState,
    count: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    if count == 0 {
        return Err(Error::EmptyEnsemble);
    }
    policy.check_compatible(sys)?;
    if initial.dim() != sys.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial state has dimension {}, system has {}",
            initial.dim(),
            sys.state_dim()
        )));
    }
    let (n, m) = (sys.state_dim(), sys.input_dim());
    let noise_roots: Vec<DMatrix<f64>> = policy
        .steps
        .iter()
        .map(|s| psd_sqrt(&s.noise_cov).map(SymMatrix::into_matrix))
        .collect::<Result<_>>()?;
    let initial_root = match initial {
        InitialState::Gaussian(g) => Some(psd_sqrt(&g.cov)?.into_matrix()),
        InitialState::Point(_) => None,
    };

    let paths: Vec<(Vec<DVector<f64>>, Vec<DVector<f64>>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut x = match (initial, &initial_root) {
                (InitialState::Gaussian(g), Some(root)) => {
                    &g.mean + root * standard_normal(&mut rng, n)
                }
                (InitialState::Point(p), _) => p.clone(),
                (InitialState::Gaussian(g), None) => g.mean.clone(),
            };
            let mut states = Vec::with_capacity(policy.horizon() + 1);
            let mut controls = Vec::with_capacity(policy.horizon());
            for (k, step) in policy.steps.iter().enumerate() {
                let u = &step.gain * &x
                    + &step.feedforward
                    + &noise_roots[k] * standard_normal(&mut rng, m);
                let next = sys.a(k) * &x + sys.b(k) * &u;
                states.push(std::mem::replace(&mut x, next));
                controls.push(u);
            }
            states.push(x);
            (states, controls)
        })
        .collect();

    let (states, controls) = paths.into_iter().unzip();
    Ok(TrajectoryEnsemble {
        states,
        controls,
        seed,
    })
}

/// Sample mean and unbiased sample covariance of `x_k`.
pub fn empirical_moments(ens: &TrajectoryEnsemble, k: usize) -> Result<EmpiricalMoments> {
    if k > ens.horizon() {
        return Err(Error::StepOutOfRange {
            step: k,
            horizon: ens.horizon(),
        });
    }
    let n = ens.state_dim();
    let count = ens.sample_count();
    let mut mean = DVector::zeros(n);
    for path in &ens.states {
        mean += &path[k];
    }
    mean /= count as f64;
    if count < 2 {
        return Ok(EmpiricalMoments {
            mean,
            cov: SymMatrix::zeros(n),
            cov_defined: false,
        });
    }
    let mut cov = DMatrix::zeros(n, n);
    for path in &ens.states {
        let d = &path[k] - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    Ok(EmpiricalMoments {
        mean,
        cov: SymMatrix::new(cov / (count - 1) as f64),
        cov_defined: true,
    })
}

/// Largest `‖x_{k+1} − A_k x_k − B_k u_k‖_∞` over all stored paths.
pub fn dynamics_residual(sys: &LinearSystemModel, ens: &TrajectoryEnsemble) -> f64 {
    ens.states
        .iter()
        .zip(&ens.controls)
        .flat_map(|(xs, us)| {
            us.iter()
                .enumerate()
                .map(move |(k, u)| (&xs[k + 1] - sys.a(k) * &xs[k] - sys.b(k) * u).amax())
        })
        .fold(0.0, f64::max)
}
