//! Problem specification files (TOML).
//!
//! ```toml
//! horizon = 50
//! epsilon = 1.0
//! seed = 7          # optional
//! samples = 1000    # optional
//! A = [[0.9, 0.1], [0.05, 1.2]]   # one matrix, or a list of N matrices
//! B = [[0.0], [0.22]]
//!
//! [initial]
//! mean = [-2.0, 4.0]
//! cov = [[7.0, 3.0], [3.0, 5.0]]
//!
//! [terminal]
//! mean = [1.0, 0.0]
//! cov = [[0.3, 0.0], [0.0, 0.3]]
//! ```
//!
//! Point mode replaces both `mean`/`cov` pairs by `point = [...]`.

use std::ops::Range;

use maxent_steer::{
    DMatrix, DVector, DensityBoundary, GaussianMarginal, LinearSystemModel, SymMatrix,
};
use serde::Deserialize;
use toml::Spanned;

use crate::CliError;

/// Relative asymmetry tolerated in covariance input.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    horizon: Spanned<i64>,
    epsilon: Option<Spanned<f64>>,
    seed: Option<Spanned<i64>>,
    samples: Option<Spanned<i64>>,
    #[serde(rename = "A", alias = "a")]
    a: Spanned<MatrixInput>,
    #[serde(rename = "B", alias = "b")]
    b: Spanned<MatrixInput>,
    initial: Spanned<RawEnd>,
    terminal: Spanned<RawEnd>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MatrixInput {
    Single(Vec<Vec<f64>>),
    Sequence(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnd {
    mean: Option<Spanned<Vec<f64>>>,
    cov: Option<Spanned<Vec<Vec<f64>>>>,
    point: Option<Spanned<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Endpoints {
    Density(DensityBoundary),
    Point {
        start: DVector<f64>,
        target: DVector<f64>,
    },
}

impl Endpoints {
    pub fn mode(&self) -> &'static str {
        match self {
            Endpoints::Density(_) => "density",
            Endpoints::Point { .. } => "point",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub system: LinearSystemModel,
    /// Required in density mode, ignored by the pinned controller.
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub endpoints: Endpoints,
}

impl ProblemSpec {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Input(msg) => CliError::Input(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: RawSpec = toml::from_str(text)
            .map_err(|e| CliError::Input(e.to_string().trim_end().to_string()))?;
        Builder { text }.build(raw)
    }

    /// The density boundary, or an input error naming the command.
    pub fn density(&self, command: &str) -> Result<&DensityBoundary, CliError> {
        match &self.endpoints {
            Endpoints::Density(b) => Ok(b),
            Endpoints::Point { .. } => Err(CliError::Input(format!(
                "`{command}` needs a density-mode spec (mean and cov at both ends)"
            ))),
        }
    }

    pub fn require_epsilon(&self) -> Result<f64, CliError> {
        self.epsilon
            .ok_or_else(|| CliError::Input("density mode needs `epsilon`".to_string()))
    }
}

struct Builder<'a> {
    text: &'a str,
}

impl Builder<'_> {
    fn at(&self, span: Range<usize>, msg: impl std::fmt::Display) -> CliError {
        let before = &self.text[..span.start.min(self.text.len())];
        let line = before.matches('\n').count() + 1;
        let column = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
        CliError::Input(format!("line {line}, column {column}: {msg}"))
    }

    fn build(&self, raw: RawSpec) -> Result<ProblemSpec, CliError> {
        let horizon = usize::try_from(*raw.horizon.get_ref())
            .ok()
            .filter(|&h| h >= 1)
            .ok_or_else(|| self.at(raw.horizon.span(), "horizon must be a positive integer"))?;
        let epsilon = match &raw.epsilon {
            Some(e) if !(*e.get_ref() > 0.0 && e.get_ref().is_finite()) => {
                return Err(self.at(e.span(), "epsilon must be positive and finite"))
            }
            Some(e) => Some(*e.get_ref()),
            None => None,
        };
        let seed = match &raw.seed {
            Some(s) => Some(
                u64::try_from(*s.get_ref())
                    .map_err(|_| self.at(s.span(), "seed must be a nonnegative integer"))?,
            ),
            None => None,
        };
        let samples = match &raw.samples {
            Some(s) => Some(
                usize::try_from(*s.get_ref())
                    .ok()
                    .filter(|&c| c >= 1)
                    .ok_or_else(|| self.at(s.span(), "samples must be a positive integer"))?,
            ),
            None => None,
        };

        let a = self.sequence(&raw.a, horizon, "A")?;
        let n = a[0].nrows();
        for (k, ak) in a.iter().enumerate() {
            if ak.nrows() != n || ak.ncols() != n {
                return Err(self.at(
                    raw.a.span(),
                    format!("A_{k} is {}x{}, expected {n}x{n}", ak.nrows(), ak.ncols()),
                ));
            }
        }
        let b = self.sequence(&raw.b, horizon, "B")?;
        let m = b[0].ncols();
        for (k, bk) in b.iter().enumerate() {
            if bk.nrows() != n || bk.ncols() != m {
                return Err(self.at(
                    raw.b.span(),
                    format!("B_{k} is {}x{}, expected {n}x{m}", bk.nrows(), bk.ncols()),
                ));
            }
        }
        let system = LinearSystemModel::new(a, b).map_err(|e| self.at(raw.a.span(), e))?;

        let endpoints = match (
            self.end(&raw.initial, n, "initial")?,
            self.end(&raw.terminal, n, "terminal")?,
        ) {
            (End::Density(i), End::Density(t)) => {
                if epsilon.is_none() {
                    return Err(CliError::Input("density mode needs `epsilon`".to_string()));
                }
                Endpoints::Density(
                    DensityBoundary::new(i, t).map_err(|e| CliError::Input(e.to_string()))?,
                )
            }
            (End::Point(start), End::Point(target)) => Endpoints::Point { start, target },
            _ => {
                return Err(self.at(
                    raw.terminal.span(),
                    "mixed modes: both ends need mean/cov (density) or both need point",
                ))
            }
        };
        Ok(ProblemSpec {
            system,
            epsilon,
            seed,
            samples,
            endpoints,
        })
    }

    fn matrix(
        &self,
        rows: &[Vec<f64>],
        span: Range<usize>,
        name: &str,
    ) -> Result<DMatrix<f64>, CliError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 {
            return Err(self.at(span, format!("{name} is empty")));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != cols) {
            return Err(self.at(
                span,
                format!(
                    "{name} row {i} has {} entries, row 0 has {cols}",
                    rows[i].len()
                ),
            ));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(self.at(span, format!("{name} has a non-finite entry")));
        }
        Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }

    fn sequence(
        &self,
        input: &Spanned<MatrixInput>,
        horizon: usize,
        name: &str,
    ) -> Result<Vec<DMatrix<f64>>, CliError> {
        match input.get_ref() {
            MatrixInput::Single(rows) => Ok(vec![self.matrix(rows, input.span(), name)?; horizon]),
            MatrixInput::Sequence(seq) => {
                if seq.len() != horizon {
                    return Err(self.at(
                        input.span(),
                        format!("{name} lists {} matrices, horizon is {horizon}", seq.len()),
                    ));
                }
                seq.iter()
                    .enumerate()
                    .map(|(k, rows)| self.matrix(rows, input.span(), &format!("{name}_{k}")))
                    .collect()
            }
        }
    }

    fn vector(
        &self,
        v: &Spanned<Vec<f64>>,
        n: usize,
        name: &str,
    ) -> Result<DVector<f64>, CliError> {
        if v.get_ref().len() != n {
            return Err(self.at(
                v.span(),
                format!(
                    "{name} has length {}, state dimension is {n}",
                    v.get_ref().len()
                ),
            ));
        }
        if v.get_ref().iter().any(|x| !x.is_finite()) {
            return Err(self.at(v.span(), format!("{name} has a non-finite entry")));
        }
        Ok(DVector::from_column_slice(v.get_ref()))
    }

    fn end(&self, raw: &Spanned<RawEnd>, n: usize, which: &str) -> Result<End, CliError> {
        let r = raw.get_ref();
        match (&r.mean, &r.cov, &r.point) {
            (Some(mean), Some(cov), None) => {
                let mean = self.vector(mean, n, &format!("{which}.mean"))?;
                let name = format!("{which}.cov");
                let c = self.matrix(cov.get_ref(), cov.span(), &name)?;
                if c.nrows() != n || c.ncols() != n {
                    return Err(self.at(
                        cov.span(),
                        format!(
                            "{name} is {}x{}, state dimension is {n}",
                            c.nrows(),
                            c.ncols()
                        ),
                    ));
                }
                let asym = (&c - c.transpose()).amax();
                if asym > SYMMETRY_TOL * (1.0 + c.amax()) {
                    return Err(self.at(cov.span(), format!("{name} is not symmetric")));
                }
                let marginal = GaussianMarginal::new(mean, SymMatrix::new(c))
                    .map_err(|e| self.at(cov.span(), format!("{name}: {e}")))?;
                Ok(End::Density(marginal))
            }
            (None, None, Some(point)) => Ok(End::Point(self.vector(
                point,
                n,
                &format!("{which}.point"),
            )?)),
            _ => Err(self.at(
                raw.span(),
                format!("[{which}] needs either `mean` and `cov`, or `point` alone"),
            )),
        }
    }
}

enum End {
    Density(GaussianMarginal),
    Point(DVector<f64>),
}
