//! Command implementations behind the `maxent-steer` binary.
//!
//! Every command writes its primary output to `out` (a file or stdout) and a
//! human-readable summary to `log`. Exit status: 0 success, 1 infeasible or
//! failed verification, 2 input error.

pub mod output;
pub mod spec;

use std::io::Write;
use std::path::{Path, PathBuf};

use maxent_steer::{
    bridge_verify, definiteness, ellipse_points, empirical_moments, point_to_point_policy,
    sample_ensemble, solve_density, validate_assumptions, validate_pinned, AffineGaussianPolicy,
    DMatrix, Error, InitialState, SymMatrix,
};
use thiserror::Error as ThisError;

use output::{to_json, write_ellipse, write_trajectories, Diagnostics, PolicyFile};
use spec::{Endpoints, ProblemSpec};

/// Bound on every bridge residual for `bridge-check` to pass.
pub const BRIDGE_TOL: f64 = 1e-7;
pub const DEFAULT_SAMPLES: usize = 1000;
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, ThisError, PartialEq)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Infeasible(_) | CliError::Verification(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InfeasibleProblem(_)
            | Error::SingularGramian(_)
            | Error::SingularA { .. }
            | Error::BranchDegenerate { .. }
            | Error::GateNotPd { .. }
            | Error::SingularBlock => CliError::Infeasible(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn io_error(path: Option<&Path>) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| match path {
        Some(p) => CliError::Input(format!("cannot write {}: {e}", p.display())),
        None => CliError::Input(format!("cannot write output: {e}")),
    }
}

/// Where the primary output of a command goes.
pub enum Sink<'a> {
    File(PathBuf),
    Stream(&'a mut dyn Write),
}

impl Sink<'_> {
    fn write_with(
        &mut self,
        f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<(), CliError> {
        match self {
            Sink::File(path) => {
                let file = std::fs::File::create(&*path).map_err(io_error(Some(path)))?;
                let mut w = std::io::BufWriter::new(file);
                f(&mut w)
                    .and_then(|_| w.flush())
                    .map_err(io_error(Some(path)))
            }
            Sink::Stream(w) => f(*w).map_err(io_error(None)),
        }
    }

    fn write_str(&mut self, s: &str) -> Result<(), CliError> {
        self.write_with(|w| w.write_all(s.as_bytes()))
    }
}

fn log_line(log: &mut dyn Write, line: impl AsRef<str>) {
    // A closed log stream is not worth failing a command over.
    let _ = writeln!(log, "{}", line.as_ref());
}

/// Loads a spec and applies `--epsilon-override`.
pub fn load_spec(path: &Path, epsilon_override: Option<f64>) -> Result<ProblemSpec, CliError> {
    let mut spec = ProblemSpec::load(path)?;
    if let Some(e) = epsilon_override {
        if !(e > 0.0 && e.is_finite()) {
            return Err(CliError::Input(format!(
                "--epsilon-override must be positive, got {e}"
            )));
        }
        spec.epsilon = Some(e);
    }
    Ok(spec)
}

fn fmt_list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", items.join(", "))
}

pub fn cmd_validate(
    spec: &ProblemSpec,
    out: &mut Sink,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let sys = &spec.system;
    log_line(
        log,
        format!(
            "{} mode, n = {}, m = {}, N = {}",
            spec.endpoints.mode(),
            sys.state_dim(),
            sys.input_dim(),
            sys.horizon()
        ),
    );
    let (json, feasible, diagnostics) = match &spec.endpoints {
        Endpoints::Density(boundary) => {
            let eps = spec.require_epsilon()?;
            let report = validate_assumptions(sys, boundary, eps);
            if let Some(k) = report.gramian_window {
                log_line(log, format!("Gramian window k_r = {k}"));
            }
            if let (Some(f), Some(b)) = (report.f_matrix_min_singular, report.b_matrix_min_singular)
            {
                log_line(
                    log,
                    format!("forward/backward matrix min singular values: {f:.6e} / {b:.6e}"),
                );
            }
            (to_json(&report)?, report.feasible, report.diagnostics)
        }
        Endpoints::Point { .. } => {
            let report = validate_pinned(sys);
            log_line(
                log,
                format!(
                    "reachability Gramian rcond {:.6e}",
                    report.reachability_rcond
                ),
            );
            (to_json(&report)?, report.feasible, report.diagnostics)
        }
    };
    for d in &diagnostics {
        log_line(log, d);
    }
    log_line(log, if feasible { "feasible" } else { "infeasible" });
    out.write_str(&json)?;
    if feasible {
        Ok(())
    } else {
        Err(CliError::Infeasible(
            diagnostics
                .first()
                .cloned()
                .unwrap_or_else(|| "assumptions not satisfied".to_string()),
        ))
    }
}

/// The controller the spec's mode calls for, as a policy file.
pub fn synthesize(spec: &ProblemSpec, log: &mut dyn Write) -> Result<PolicyFile, CliError> {
    let sys = &spec.system;
    let (n, m) = (sys.state_dim(), sys.input_dim());
    match &spec.endpoints {
        Endpoints::Density(boundary) => {
            let eps = spec.require_epsilon()?;
            let report = validate_assumptions(sys, boundary, eps);
            if let Some(why) = report.failure() {
                return Err(CliError::Infeasible(why));
            }
            let sol = solve_density(sys, boundary, eps)?;
            let pair = &sol.lyapunov;
            let residual = pair
                .residuals(sys, &boundary.initial.cov, &boundary.terminal.cov, eps)
                .max();
            let cost = sol.policy.expected_cost(
                sys,
                &boundary.initial.mean,
                &boundary.initial.cov,
                eps,
            )?;
            let diagnostics = Diagnostics {
                terminal_weight_eigenvalues: pair.q_inverse(sys.horizon()).eigenvalues(),
                gate_min_eigenvalues: pair.gates.iter().map(|g| g.min_eig).collect(),
                lyapunov_residual: residual,
                expected_cost: cost,
            };
            log_line(
                log,
                format!(
                    "terminal weight eigenvalues {}",
                    fmt_list(&diagnostics.terminal_weight_eigenvalues)
                ),
            );
            log_line(
                log,
                format!("Lyapunov residual {residual:.3e}, expected cost {cost:.6}"),
            );
            let mut file = PolicyFile::new("density", Some(eps), &sol.policy, n, m)
                .with_backward_factor(&pair.q);
            file.diagnostics = Some(diagnostics);
            Ok(file)
        }
        Endpoints::Point { start, target } => {
            let report = validate_pinned(sys);
            if !report.feasible {
                return Err(CliError::Infeasible(report.diagnostics.join("; ")));
            }
            let policy = point_to_point_policy(sys, start, target)?;
            log_line(log, "point-to-point policy: cost not reported (no finite objective in the pinned limit)");
            Ok(PolicyFile::new("point", None, &policy, n, m))
        }
    }
}

pub fn cmd_solve(spec: &ProblemSpec, out: &mut Sink, log: &mut dyn Write) -> Result<(), CliError> {
    let file = synthesize(spec, log)?;
    out.write_str(&to_json(&file)?)
}

pub struct SteerOptions {
    /// `None` synthesizes the controller from the spec.
    pub policy: Option<PathBuf>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    /// Reject density-mode specs (`pin`).
    pub point_only: bool,
}

fn load_policy(path: &Path, spec: &ProblemSpec) -> Result<AffineGaussianPolicy, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let file = PolicyFile::parse(&text)?;
    if file.mode != spec.endpoints.mode() {
        return Err(CliError::Input(format!(
            "policy file is for {} mode, spec is {} mode",
            file.mode,
            spec.endpoints.mode()
        )));
    }
    let policy = file.policy()?;
    policy.check_compatible(&spec.system)?;
    for (k, s) in policy.steps.iter().enumerate() {
        if !definiteness(&s.noise_cov).is_psd() {
            return Err(CliError::Input(format!(
                "policy file: noise_cov {k} is not positive semidefinite"
            )));
        }
    }
    Ok(policy)
}

pub fn cmd_steer(
    spec: &ProblemSpec,
    opts: &SteerOptions,
    out: &mut Sink,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    if opts.point_only && spec.endpoints.mode() != "point" {
        return Err(CliError::Input(
            "`pin` needs a point-mode spec (`point` at both ends)".to_string(),
        ));
    }
    let sys = &spec.system;
    let policy = match &opts.policy {
        Some(path) => load_policy(path, spec)?,
        None => synthesize(spec, log)?.policy()?,
    };
    let initial = match &spec.endpoints {
        Endpoints::Density(b) => InitialState::Gaussian(b.initial.clone()),
        Endpoints::Point { start, .. } => InitialState::Point(start.clone()),
    };
    let count = opts.samples.or(spec.samples).unwrap_or(DEFAULT_SAMPLES);
    let seed = opts.seed.or(spec.seed).unwrap_or(DEFAULT_SEED);
    let ens = sample_ensemble(sys, &policy, &initial, count, seed)?;
    out.write_with(|w| write_trajectories(w, &ens, sys.input_dim()))?;

    let last = empirical_moments(&ens, sys.horizon())?;
    log_line(log, format!("{count} paths, seed {seed}"));
    match &spec.endpoints {
        Endpoints::Density(b) => {
            let mean_err = (&last.mean - &b.terminal.mean).amax();
            log_line(log, format!("terminal mean error {mean_err:.3e}"));
            if last.cov_defined {
                let target = b.terminal.cov.as_matrix();
                let rel = (last.cov.as_matrix() - target).norm() / target.norm();
                log_line(log, format!("terminal covariance relative error {rel:.3e}"));
            }
        }
        Endpoints::Point { target, .. } => {
            let miss = ens
                .states
                .iter()
                .map(|p| (&p[sys.horizon()] - target).amax())
                .fold(0.0, f64::max);
            log_line(
                log,
                format!(
                    "largest terminal miss {miss:.3e}; cost not reported for point-to-point runs"
                ),
            );
        }
    }
    Ok(())
}

pub fn cmd_bridge_check(
    spec: &ProblemSpec,
    out: &mut Sink,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let boundary = spec.density("bridge-check")?;
    let eps = spec.require_epsilon()?;
    let sys = &spec.system;
    if let Some(why) = validate_assumptions(sys, boundary, eps).failure() {
        return Err(CliError::Infeasible(why));
    }
    if eps != 1.0 {
        log_line(
            log,
            format!("note: epsilon = {eps}; checks run on the normalized problem with B scaled by sqrt(epsilon)"),
        );
    }
    let report = bridge_verify(sys, boundary, eps)?;
    let r = &report.residuals;
    let mut text = String::new();
    let mut line = |s: String| {
        text.push_str(&s);
        text.push('\n');
    };
    line(format!(
        "(a) first-order optimality     {:.3e}",
        r.first_order
    ));
    line(format!(
        "(b) value-function identity    {:.3e}",
        r.j_identity
    ));
    line(format!(
        "(c) pinned target gain         {:.3e}",
        r.pinned_target_gain
    ));
    line(format!(
        "    pinned closed loop         {:.3e}",
        r.pinned_closed_loop
    ));
    line(format!(
        "    pinned noise               {:.3e}",
        r.pinned_noise
    ));
    line(format!(
        "(d) KL gap                     {:.3e}  (path {:.9e}, coupling {:.9e})",
        r.kl_gap, report.path_kl, report.coupling_kl
    ));
    let p = &report.perturbation;
    line(format!(
        "perturbations: {} feasible of {} drawn, {} improved the objective",
        p.feasible, p.attempts, p.improved
    ));
    out.write_str(&text)?;

    let worst = r.max();
    let perturbation_ok =
        p.improved == 0 && p.feasible == maxent_steer::bridge::PERTURBATION_TRIALS;
    log_line(
        log,
        format!("largest residual {worst:.3e} (tol {BRIDGE_TOL:e})"),
    );
    if worst <= BRIDGE_TOL && perturbation_ok {
        Ok(())
    } else if !perturbation_ok {
        Err(CliError::Verification(format!(
            "perturbation check: {} of {} feasible perturbations improved the objective",
            p.improved, p.feasible
        )))
    } else {
        let (name, value) =
            r.named().into_iter().fold(
                ("", f64::NEG_INFINITY),
                |a, b| if b.1 > a.1 { b } else { a },
            );
        Err(CliError::Verification(format!(
            "{name} residual {value:.3e} exceeds {BRIDGE_TOL:e}"
        )))
    }
}

/// Parses `[[a, b], [c, d]]`.
pub fn parse_cov(text: &str) -> Result<SymMatrix, CliError> {
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(text).map_err(|e| CliError::Input(format!("--cov: {e}")))?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Input("--cov must be a square matrix".to_string()));
    }
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    if (&m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(CliError::Input("--cov is not symmetric".to_string()));
    }
    Ok(SymMatrix::new(m))
}

pub fn cmd_ellipse(
    cov: &SymMatrix,
    level: f64,
    points: usize,
    out: &mut Sink,
) -> Result<(), CliError> {
    if !(level > 0.0 && level.is_finite()) {
        return Err(CliError::Input(format!(
            "--level must be positive, got {level}"
        )));
    }
    if points == 0 {
        return Err(CliError::Input("--points must be positive".to_string()));
    }
    let pts = ellipse_points(cov, level, points)?;
    out.write_with(|w| write_ellipse(w, &pts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Input(String::new()).exit_code(), 2);
        assert_eq!(CliError::Infeasible(String::new()).exit_code(), 1);
        assert_eq!(CliError::Verification(String::new()).exit_code(), 1);
        assert_eq!(
            CliError::from(Error::SingularGramian("reachability")).exit_code(),
            1
        );
        assert_eq!(CliError::from(Error::NotTwoDimensional(3)).exit_code(), 2);
    }

    #[test]
    fn cov_argument() {
        assert_eq!(
            parse_cov("[[4, 0], [0, 1]]").unwrap(),
            SymMatrix::from_diagonal(&[4.0, 1.0])
        );
        assert!(parse_cov("[[4, 1], [0, 1]]").is_err());
        assert!(parse_cov("[[4, 0]]").is_err());
        assert!(parse_cov("nonsense").is_err());
    }
}
