//! Domain types shared across the crate and the counterfactual-function
//! interface `gamma = g(D, theta)`.
//!
//! Flows are dyadic: entry `(i, j)` is the flow from origin `i` to
//! destination `j`. Flow units are opaque to every routine here.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_square(values: &DMatrix<f64>, labels: &[String], what: &str) -> Result<()> {
    if values.nrows() != values.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "{what} must be square, got {}x{}",
            values.nrows(),
            values.ncols()
        )));
    }
    if labels.len() != values.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{what} has {} labels for {} locations",
            labels.len(),
            values.nrows()
        )));
    }
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate location label {l:?}")));
        }
    }
    Ok(())
}

fn default_labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("L{i}")).collect()
}

/// Square matrix of non-negative dyadic flows.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrix {
    labels: Vec<String>,
    values: DMatrix<f64>,
}

impl FlowMatrix {
    pub fn new(labels: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        check_square(&values, &labels, "flow matrix")?;
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "flows must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self { labels, values })
    }

    /// Builds a flow matrix with generated labels `L0, L1, ...`.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let labels = default_labels(values.nrows());
        Self::new(labels, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("rows must all have length n".into()));
        }
        Self::from_matrix(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Same labels, new values. Values are validated.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::new(self.labels.clone(), values)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        self.with_values(&self.values * c)
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}

/// Square matrix of distances, strictly positive off the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    labels: Vec<String>,
    values: DMatrix<f64>,
}

impl DistanceMatrix {
    pub fn new(labels: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        check_square(&values, &labels, "distance matrix")?;
        let n = values.nrows();
        for i in 0..n {
            for j in 0..n {
                let d = values[(i, j)];
                if i != j && !(d.is_finite() && d > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "distance ({i},{j}) must be finite and positive, got {d}"
                    )));
                }
            }
        }
        Ok(Self { labels, values })
    }

    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let labels = default_labels(values.nrows());
        Self::new(labels, values)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }
}

/// Proportional trade-cost changes for a counterfactual.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualSpec {
    values: DMatrix<f64>,
}

impl CounterfactualSpec {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::ShapeMismatch("counterfactual spec must be square".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "cost changes must be positive and finite, found {v}"
            )));
        }
        Ok(Self { values })
    }

    /// No change anywhere.
    pub fn identity(n: usize) -> Self {
        Self {
            values: DMatrix::from_element(n, n, 1.0),
        }
    }

    /// `1 + increase` on every off-diagonal dyad, 1 on the diagonal.
    pub fn uniform_increase(n: usize, increase: f64) -> Result<Self> {
        Self::new(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else {
                1.0 + increase
            }
        }))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn has_unit_diagonal(&self) -> bool {
        (0..self.n()).all(|i| self.values[(i, i)] == 1.0)
    }
}

/// Point estimate and sampling variance of a structural parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub theta_hat: Vec<f64>,
    /// Row-major `d x d` sampling variance.
    pub sigma_hat: Vec<Vec<f64>>,
    /// Draw from a log-normal with median `theta_hat` instead of a normal.
    #[serde(default)]
    pub positive: bool,
}

impl EstimatorResult {
    pub fn new(theta_hat: Vec<f64>, sigma_hat: Vec<Vec<f64>>) -> Result<Self> {
        let r = Self {
            theta_hat,
            sigma_hat,
            positive: false,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn scalar(theta: f64, variance: f64) -> Result<Self> {
        Self::new(vec![theta], vec![vec![variance]])
    }

    pub fn with_positive(mut self, positive: bool) -> Self {
        self.positive = positive;
        self
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.sigma_hat[i][j])
    }

    /// Checks shape, symmetry and positive semidefiniteness (tolerance 1e-10).
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidInput("empty parameter vector".into()));
        }
        if self.sigma_hat.len() != d || self.sigma_hat.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch(format!("sigma_hat must be {d}x{d}")));
        }
        if self.theta_hat.iter().any(|t| !t.is_finite())
            || self.sigma_hat.iter().flatten().any(|s| !s.is_finite())
        {
            return Err(Error::InvalidInput("non-finite estimator output".into()));
        }
        let s = self.sigma_matrix();
        for i in 0..d {
            for j in 0..i {
                if (s[(i, j)] - s[(j, i)]).abs() > 1e-10 {
                    return Err(Error::NotPsd);
                }
            }
        }
        let sym = (&s + s.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().min();
        if min_eig < -1e-10 {
            return Err(Error::NotPsd);
        }
        Ok(())
    }
}

/// Baseline aggregates implied by a flow matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    /// Row sums `Y_i`.
    pub income: Vec<f64>,
    /// Column sums `E_j`.
    pub expenditure: Vec<f64>,
    /// Trade imbalance `(E_i - Y_i) / Y_i`.
    pub kappa: Vec<f64>,
    /// Expenditure shares `F_ij / E_j`; columns sum to one.
    pub shares: DMatrix<f64>,
}

pub fn derive_aggregates(flows: &FlowMatrix) -> Result<Aggregates> {
    let n = flows.n();
    let f = flows.values();
    let income: Vec<f64> = (0..n).map(|i| f.row(i).sum()).collect();
    let expenditure: Vec<f64> = (0..n).map(|j| f.column(j).sum()).collect();
    if let Some(i) = income.iter().position(|y| *y <= 0.0) {
        return Err(Error::ZeroMarginal {
            kind: "income",
            index: i,
        });
    }
    if let Some(j) = expenditure.iter().position(|e| *e <= 0.0) {
        return Err(Error::ZeroMarginal {
            kind: "expenditure",
            index: j,
        });
    }
    let kappa = income
        .iter()
        .zip(&expenditure)
        .map(|(y, e)| (e - y) / y)
        .collect();
    let shares = DMatrix::from_fn(n, n, |i, j| f[(i, j)] / expenditure[j]);
    Ok(Aggregates {
        income,
        expenditure,
        kappa,
        shares,
    })
}

/// A counterfactual mapping `(flows, theta, spec) -> gamma`.
///
/// Implementations must be deterministic. Failures (non-convergence,
/// invalid parameter draws) are returned as errors so callers can skip
/// and count them.
pub trait ModelFunction: Send + Sync {
    fn name(&self) -> &str;

    /// Labels of the outcome coordinates for a given data set.
    fn outcome_labels(&self, flows: &FlowMatrix) -> Vec<String>;

    fn evaluate(
        &self,
        flows: &FlowMatrix,
        theta: &[f64],
        spec: &CounterfactualSpec,
    ) -> Result<Vec<f64>>;
}

/// Evaluates `g` and normalizes any failure into
/// [`Error::ModelEvaluationFailed`].
pub fn evaluate_model(
    g: &dyn ModelFunction,
    flows: &FlowMatrix,
    theta: &[f64],
    spec: &CounterfactualSpec,
) -> Result<Vec<f64>> {
    if spec.n() != flows.n() {
        return Err(Error::ShapeMismatch(format!(
            "spec is {}x{} but flows are {}x{}",
            spec.n(),
            spec.n(),
            flows.n(),
            flows.n()
        )));
    }
    match g.evaluate(flows, theta, spec) {
        Ok(gamma) if gamma.iter().all(|v| v.is_finite()) => Ok(gamma),
        Ok(_) => Err(Error::ModelEvaluationFailed(format!(
            "{} returned a non-finite outcome",
            g.name()
        ))),
        Err(Error::ModelEvaluationFailed(msg)) => Err(Error::ModelEvaluationFailed(msg)),
        Err(e) => Err(Error::ModelEvaluationFailed(format!("{}: {e}", g.name()))),
    }
}

/// `g(D, theta) = theta`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityModel;

impl ModelFunction for IdentityModel {
    fn name(&self) -> &str {
        "identity"
    }

    fn outcome_labels(&self, _flows: &FlowMatrix) -> Vec<String> {
        vec!["theta".to_string()]
    }

    fn evaluate(&self, _: &FlowMatrix, theta: &[f64], _: &CounterfactualSpec) -> Result<Vec<f64>> {
        Ok(theta.to_vec())
    }
}

/// Returns the same outcome vector whatever the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantModel(pub Vec<f64>);

impl ModelFunction for ConstantModel {
    fn name(&self) -> &str {
        "constant"
    }

    fn outcome_labels(&self, _flows: &FlowMatrix) -> Vec<String> {
        (0..self.0.len()).map(|q| format!("gamma{q}")).collect()
    }

    fn evaluate(&self, _: &FlowMatrix, _: &[f64], _: &CounterfactualSpec) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

/// Which posteriors a draw set was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    OnlyEe,
    OnlyMe,
    EeMe,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::OnlyEe => "only-ee",
            Provenance::OnlyMe => "only-me",
            Provenance::EeMe => "ee-me",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "only-ee" | "ee" => Ok(Provenance::OnlyEe),
            "only-me" | "me" => Ok(Provenance::OnlyMe),
            "ee-me" | "ee+me" | "both" => Ok(Provenance::EeMe),
            other => Err(Error::InvalidInput(format!("unknown mode {other:?}"))),
        }
    }
}

/// Posterior draws of the outcome vector.
///
/// `draws[q]` holds the successful draws of outcome `q`, aligned with
/// `draw_index`. Failed draws are listed in `failed` and never appear in
/// `draws`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawSet {
    pub outcome_labels: Vec<String>,
    pub draws: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub draw_index: Vec<usize>,
    pub failed: Vec<usize>,
    pub b: usize,
    pub seed: u64,
    pub provenance: Provenance,
}

impl DrawSet {
    pub fn draws_used(&self) -> usize {
        self.draw_index.len()
    }

    pub fn draws_failed(&self) -> usize {
        self.failed.len()
    }

    pub fn outcome(&self, q: usize) -> &[f64] {
        &self.draws[q]
    }

    /// Raw draws as CSV: `draw,<outcome labels...>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("draw");
        for l in &self.outcome_labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (k, b) in self.draw_index.iter().enumerate() {
            out.push_str(&b.to_string());
            for q in &self.draws {
                out.push(',');
                out.push_str(&format!("{:?}", q[k]));
            }
            out.push('\n');
        }
        out
    }
}
