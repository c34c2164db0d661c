//! Policy files (JSON) and CSV writers. Every float is written with 17
//! significant digits, so values survive a write/read cycle bit for bit.

use std::io::{self, Write};

use maxent_steer::{
    AffineGaussianPolicy, DMatrix, DVector, PolicyStep, SymMatrix, TrajectoryEnsemble,
};
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::CliError;

pub const POLICY_FORMAT: &str = "maxent-steer-policy/1";

/// `{:.16e}`, i.e. 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Pretty JSON whose floats use [`fmt_f64`].
struct FixedDigits<'a>(PrettyFormatter<'a>);

impl Formatter for FixedDigits<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if !value.is_finite() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "non-finite number",
            ));
        }
        writer.write_all(fmt_f64(value).as_bytes())
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, FixedDigits(PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .map_err(|e| CliError::Input(format!("cannot serialize: {e}")))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("JSON output is UTF-8"))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(
    rows: &[Vec<f64>],
    shape: (usize, usize),
    what: &str,
) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(CliError::Input(format!(
            "{what} is not {}x{}",
            shape.0, shape.1
        )));
    }
    Ok(DMatrix::from_fn(shape.0, shape.1, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub gain: Vec<Vec<f64>>,
    pub feedforward: Vec<f64>,
    pub noise_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    /// Eigenvalues of `Q_N⁻¹`, ascending.
    pub terminal_weight_eigenvalues: Vec<f64>,
    /// Smallest eigenvalue of each gate `I + B_kᵀQ_{k+1}⁻¹B_k`.
    pub gate_min_eigenvalues: Vec<f64>,
    /// Largest Lyapunov-pair residual (recursions relative, boundaries absolute).
    pub lyapunov_residual: f64,
    /// Expected entropy-regularized cost from the initial marginal.
    pub expected_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub format: String,
    /// `density` or `point`.
    pub mode: String,
    pub horizon: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub steps: Vec<StepRecord>,
    /// `Q_k`, `k = 0..=N` (density mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward_factor: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

impl PolicyFile {
    pub fn new(
        mode: &str,
        epsilon: Option<f64>,
        policy: &AffineGaussianPolicy,
        n: usize,
        m: usize,
    ) -> Self {
        PolicyFile {
            format: POLICY_FORMAT.to_string(),
            mode: mode.to_string(),
            horizon: policy.horizon(),
            state_dim: n,
            input_dim: m,
            epsilon,
            steps: policy
                .steps
                .iter()
                .map(|s| StepRecord {
                    gain: rows(&s.gain),
                    feedforward: s.feedforward.iter().copied().collect(),
                    noise_cov: rows(s.noise_cov.as_matrix()),
                })
                .collect(),
            backward_factor: None,
            diagnostics: None,
        }
    }

    pub fn with_backward_factor(mut self, q: &[SymMatrix]) -> Self {
        self.backward_factor = Some(q.iter().map(|s| rows(s.as_matrix())).collect());
        self
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: PolicyFile =
            serde_json::from_str(text).map_err(|e| CliError::Input(format!("policy file: {e}")))?;
        if file.format != POLICY_FORMAT {
            return Err(CliError::Input(format!(
                "policy file: format is {:?}, expected {POLICY_FORMAT:?}",
                file.format
            )));
        }
        if file.steps.len() != file.horizon {
            return Err(CliError::Input(format!(
                "policy file: {} steps for horizon {}",
                file.steps.len(),
                file.horizon
            )));
        }
        Ok(file)
    }

    pub fn policy(&self) -> Result<AffineGaussianPolicy, CliError> {
        let (n, m) = (self.state_dim, self.input_dim);
        let steps = self
            .steps
            .iter()
            .enumerate()
            .map(|(k, s)| {
                if s.feedforward.len() != m {
                    return Err(CliError::Input(format!(
                        "policy file: feedforward {k} has wrong length"
                    )));
                }
                Ok(PolicyStep {
                    gain: from_rows(&s.gain, (m, n), &format!("policy file: gain {k}"))?,
                    feedforward: DVector::from_column_slice(&s.feedforward),
                    noise_cov: SymMatrix::new(from_rows(
                        &s.noise_cov,
                        (m, m),
                        &format!("policy file: noise_cov {k}"),
                    )?),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(AffineGaussianPolicy { steps })
    }
}

/// `sample,step,x1..xn,u1..um`, control columns empty at step `N`.
pub fn write_trajectories<W: Write + ?Sized>(
    out: &mut W,
    ens: &TrajectoryEnsemble,
    input_dim: usize,
) -> io::Result<()> {
    let n = ens.state_dim();
    let mut header = vec!["sample".to_string(), "step".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=input_dim).map(|i| format!("u{i}")));
    writeln!(out, "{}", header.join(","))?;
    for (i, (xs, us)) in ens.states.iter().zip(&ens.controls).enumerate() {
        for (k, x) in xs.iter().enumerate() {
            let mut row = vec![i.to_string(), k.to_string()];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            match us.get(k) {
                Some(u) => row.extend(u.iter().map(|v| fmt_f64(*v))),
                None => row.extend(std::iter::repeat_n(String::new(), input_dim)),
            }
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// `point,angle,x1,x2`
pub fn write_ellipse<W: Write + ?Sized>(out: &mut W, points: &[(f64, [f64; 2])]) -> io::Result<()> {
    writeln!(out, "point,angle,x1,x2")?;
    for (i, (theta, p)) in points.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{}",
            fmt_f64(*theta),
            fmt_f64(p[0]),
            fmt_f64(p[1])
        )?;
    }
    Ok(())
}
