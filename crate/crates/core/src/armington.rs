//! Exact-hat-algebra counterfactuals for the Armington trade model.
//!
//! Given baseline flows and proportional trade-cost changes, solve for the
//! proportional income changes `y'` satisfying
//!
//! ```text
//! y'_i Y_i = sum_j lambda'_ij lambda_ij E_j y'_j,
//! lambda'_ij = (tau'_ij y'_i)^-eps / sum_k lambda_kj (tau'_kj y'_k)^-eps
//! ```
//!
//! then welfare changes `W'_i = (lambda'_ii)^(-1/eps)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derive_aggregates, Aggregates, CounterfactualSpec, FlowMatrix, ModelFunction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Weight on the new iterate in log space.
    pub damping: f64,
    /// Sup-norm tolerance on the log defect of the income system.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub y_prop: Vec<f64>,
    pub lambda_prop: DMatrix<f64>,
    pub welfare_prop: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Shares `lambda'` at log income changes `x`, computed with a per-column
/// shift so large elasticities do not overflow.
fn share_changes(
    agg: &Aggregates,
    log_tau: &DMatrix<f64>,
    x: &[f64],
    epsilon: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let expo: Vec<f64> = (0..n).map(|k| -epsilon * (log_tau[(k, j)] + x[k])).collect();
        let shift = (0..n)
            .filter(|&k| agg.shares[(k, j)] > 0.0)
            .map(|k| expo[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .map(|k| agg.shares[(k, j)] * (expo[k] - shift).exp())
            .sum();
        for i in 0..n {
            out[(i, j)] = (expo[i] - shift).exp() / denom;
        }
    }
    out
}

/// Right-hand side of the income system divided by `Y_i`.
fn income_rhs(agg: &Aggregates, lambda_prop: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let s: f64 = (0..n)
                .map(|j| lambda_prop[(i, j)] * agg.shares[(i, j)] * agg.expenditure[j] * x[j].exp())
                .sum();
            s / agg.income[i]
        })
        .collect()
}

/// Sup-norm log defect of the income system up to the common factor that
/// the world-income normalization absorbs:
/// `max_i |log(rhs_i / y'_i) - log c|` with `c = sum Y rhs / sum Y y'`.
///
/// With balanced trade `c = 1` at any solution. With imbalanced trade the
/// raw system only holds when `sum_j (E_j - Y_j) y'_j = 0`, which generic
/// counterfactuals violate, so the factor is netted out.
fn defect(agg: &Aggregates, rhs: &[f64], x: &[f64]) -> f64 {
    let num: f64 = rhs.iter().zip(&agg.income).map(|(r, y)| r * y).sum();
    let den: f64 = x.iter().zip(&agg.income).map(|(xi, y)| xi.exp() * y).sum();
    let log_c = (num / den).ln();
    rhs.iter()
        .zip(x)
        .map(|(r, xi)| (r.ln() - log_c - xi).abs())
        .fold(0.0, f64::max)
}

/// See [`defect`].
pub fn income_defect(
    flows: &FlowMatrix,
    spec: &CounterfactualSpec,
    epsilon: f64,
    y_prop: &[f64],
) -> Result<f64> {
    let agg = derive_aggregates(flows)?;
    let log_tau = spec.values().map(f64::ln);
    let x: Vec<f64> = y_prop.iter().map(|y| y.ln()).collect();
    let lp = share_changes(&agg, &log_tau, &x, epsilon);
    let rhs = income_rhs(&agg, &lp, &x);
    Ok(defect(&agg, &rhs, &x))
}

fn normalize(x: &mut [f64], income: &[f64]) {
    let world: f64 = income.iter().sum();
    let cf: f64 = x.iter().zip(income).map(|(xi, y)| xi.exp() * y).sum();
    let shift = (cf / world).ln();
    for xi in x.iter_mut() {
        *xi -= shift;
    }
}

/// Solves the counterfactual income fixed point by damped successive
/// substitution on `log y'`.
///
/// The update isolates the own-income term: at a fixed point
/// `y'_i^(1+eps) = Y_i^-1 sum_j tau'_ij^-eps lambda_ij E_j y'_j / P_j`,
/// which contracts much faster than iterating the raw system. World income
/// is held fixed after every step. The damping weight is halved whenever the
/// defect grows.
pub fn solve_counterfactual(
    flows: &FlowMatrix,
    spec: &CounterfactualSpec,
    epsilon: f64,
    opts: &SolverOptions,
) -> Result<EquilibriumResult> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidElasticity(epsilon));
    }
    let n = flows.n();
    if spec.n() != n {
        return Err(Error::ShapeMismatch(format!(
            "spec is {}x{} but flows are {n}x{n}",
            spec.n(),
            spec.n()
        )));
    }
    let agg = derive_aggregates(flows)?;
    if let Some(i) = (0..n).find(|&i| flows.get(i, i) <= 0.0) {
        return Err(Error::ZeroOwnFlow(i));
    }

    let log_tau = spec.values().map(f64::ln);
    let mut x = vec![0.0; n];

    if spec.values().iter().all(|t| *t == 1.0) {
        return Ok(EquilibriumResult {
            y_prop: vec![1.0; n],
            lambda_prop: DMatrix::from_element(n, n, 1.0),
            welfare_prop: vec![1.0; n],
            residual: 0.0,
            iterations: 0,
        });
    }

    let mut damping = opts.damping.clamp(1e-6, 1.0);
    let mut prev_residual = f64::INFINITY;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let lp = share_changes(&agg, &log_tau, &x, epsilon);
        let rhs = income_rhs(&agg, &lp, &x);
        residual = defect(&agg, &rhs, &x);
        if !residual.is_finite() {
            return Err(Error::NoConvergence {
                iterations,
                residual,
            });
        }
        if residual <= opts.tol {
            break;
        }
        if residual > prev_residual {
            damping = (damping * 0.5).max(1e-3);
        }
        prev_residual = residual;
        for i in 0..n {
            // rhs_i = y'_i^-eps * a_i  =>  target solves y^(1+eps) = a_i
            let log_a = rhs[i].ln() + epsilon * x[i];
            let target = log_a / (1.0 + epsilon);
            x[i] += damping * (target - x[i]);
        }
        normalize(&mut x, &agg.income);
        iterations += 1;
    }
    if residual > opts.tol {
        return Err(Error::NoConvergence {
            iterations,
            residual,
        });
    }

    let lambda_prop = share_changes(&agg, &log_tau, &x, epsilon);
    let welfare_prop = (0..n)
        .map(|i| lambda_prop[(i, i)].powf(-1.0 / epsilon))
        .collect();
    Ok(EquilibriumResult {
        y_prop: x.iter().map(|v| v.exp()).collect(),
        lambda_prop,
        welfare_prop,
        residual,
        iterations,
    })
}

/// `100 (W'_q - 1)` for every location.
pub fn welfare_change_pct(result: &EquilibriumResult) -> Vec<f64> {
    result.welfare_prop.iter().map(|w| 100.0 * (w - 1.0)).collect()
}

/// The Armington model as a counterfactual function with `theta = [eps]`.
#[derive(Debug, Clone, Default)]
pub struct ArmingtonModel {
    pub options: SolverOptions,
    /// Restrict outcomes to these locations; all locations when `None`.
    pub outcomes: Option<Vec<usize>>,
}

impl ArmingtonModel {
    pub fn new(options: SolverOptions) -> Self {
        Self {
            options,
            outcomes: None,
        }
    }

    pub fn with_outcomes(mut self, outcomes: Vec<usize>) -> Self {
        self.outcomes = Some(outcomes);
        self
    }
}

impl ModelFunction for ArmingtonModel {
    fn name(&self) -> &str {
        "armington"
    }

    fn outcome_labels(&self, flows: &FlowMatrix) -> Vec<String> {
        match &self.outcomes {
            Some(idx) => idx.iter().map(|&i| flows.labels()[i].clone()).collect(),
            None => flows.labels().to_vec(),
        }
    }

    fn evaluate(
        &self,
        flows: &FlowMatrix,
        theta: &[f64],
        spec: &CounterfactualSpec,
    ) -> Result<Vec<f64>> {
        let epsilon = *theta
            .first()
            .ok_or_else(|| Error::InvalidInput("armington needs theta = [epsilon]".into()))?;
        let eq = solve_counterfactual(flows, spec, epsilon, &self.options)?;
        let pct = welfare_change_pct(&eq);
        Ok(match &self.outcomes {
            Some(idx) => idx.iter().map(|&i| pct[i]).collect(),
            None => pct,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::evaluate_model;

    fn symmetric(n: usize) -> FlowMatrix {
        FlowMatrix::from_matrix(DMatrix::from_element(n, n, 1.0)).unwrap()
    }

    fn asym3() -> FlowMatrix {
        FlowMatrix::from_rows(&[
            vec![10.0, 2.0, 0.5],
            vec![1.0, 8.0, 3.0],
            vec![2.5, 0.7, 12.0],
        ])
        .unwrap()
    }

    #[test]
    fn identity_counterfactual_is_exact() {
        let f = asym3();
        let eq = solve_counterfactual(&f, &CounterfactualSpec::identity(3), 4.0, &SolverOptions::default()).unwrap();
        assert_eq!(eq.y_prop, vec![1.0; 3]);
        assert_eq!(eq.welfare_prop, vec![1.0; 3]);
        assert!(eq.lambda_prop.iter().all(|v| *v == 1.0));
        assert_eq!(welfare_change_pct(&eq), vec![0.0; 3]);
    }

    #[test]
    fn welfare_pct_map() {
        let mk = |w: Vec<f64>| EquilibriumResult {
            y_prop: vec![1.0; w.len()],
            lambda_prop: DMatrix::zeros(w.len(), w.len()),
            welfare_prop: w,
            residual: 0.0,
            iterations: 0,
        };
        assert_eq!(welfare_change_pct(&mk(vec![1.0])), vec![0.0]);
        assert!((welfare_change_pct(&mk(vec![0.9453]))[0] + 5.47).abs() < 1e-12);
        assert!((welfare_change_pct(&mk(vec![1.1]))[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_uniform_increase_lowers_welfare_equally() {
        let f = symmetric(4);
        let spec = CounterfactualSpec::uniform_increase(4, 0.1).unwrap();
        let eq = solve_counterfactual(&f, &spec, 2.0, &SolverOptions::default()).unwrap();
        let w0 = eq.welfare_prop[0];
        assert!(w0 < 1.0);
        assert!(eq.welfare_prop.iter().all(|w| (w - w0).abs() < 1e-8));
        // symmetric closed form: y' = 1, lambda'_ii = 1 / (1/4 + 3/4 * 1.1^-2)
        let lii = 1.0 / (0.25 + 0.75 * 1.1f64.powf(-2.0));
        assert!((w0 - lii.powf(-0.5)).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let f = symmetric(2);
        let spec = CounterfactualSpec::uniform_increase(2, 0.1).unwrap();
        let o = SolverOptions::default();
        assert_eq!(solve_counterfactual(&f, &spec, 0.0, &o).unwrap_err(), Error::InvalidElasticity(0.0));
        assert!(matches!(solve_counterfactual(&f, &spec, -1.0, &o), Err(Error::InvalidElasticity(_))));
        let z = FlowMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(solve_counterfactual(&z, &spec, 2.0, &o).unwrap_err(), Error::ZeroOwnFlow(0));
        let tight = SolverOptions { max_iter: 1, tol: 1e-15, ..o };
        assert!(matches!(
            solve_counterfactual(&asym3(), &CounterfactualSpec::uniform_increase(3, 0.3).unwrap(), 5.0, &tight),
            Err(Error::NoConvergence { .. })
        ));
    }

    #[test]
    fn zero_off_diagonal_flows_are_fine() {
        let f = FlowMatrix::from_rows(&[
            vec![5.0, 0.0, 1.0],
            vec![1.0, 4.0, 0.0],
            vec![0.0, 2.0, 6.0],
        ])
        .unwrap();
        let spec = CounterfactualSpec::uniform_increase(3, 0.1).unwrap();
        let eq = solve_counterfactual(&f, &spec, 4.0, &SolverOptions::default()).unwrap();
        assert!(eq.residual <= 1e-10);
        assert!(eq.welfare_prop.iter().all(|w| w.is_finite() && *w <= 1.0));
    }

    #[test]
    fn model_function_wraps_failures() {
        let m = ArmingtonModel::default();
        let f = symmetric(2);
        let spec = CounterfactualSpec::uniform_increase(2, 0.1).unwrap();
        let out = evaluate_model(&m, &f, &[-2.0], &spec);
        assert!(matches!(out, Err(Error::ModelEvaluationFailed(_))));
        let ok = evaluate_model(&m, &f, &[3.0], &CounterfactualSpec::identity(2)).unwrap();
        assert_eq!(ok, vec![0.0, 0.0]);
        let sel = ArmingtonModel::default().with_outcomes(vec![1]);
        assert_eq!(sel.outcome_labels(&f), vec!["L1".to_string()]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn world() -> impl Strategy<Value = (FlowMatrix, CounterfactualSpec, f64)> {
            (2usize..6).prop_flat_map(|n| {
                (
                    proptest::collection::vec(0.05f64..5.0, n * n),
                    proptest::collection::vec(0.8f64..1.3, n * n),
                    0.5f64..8.0,
                )
                    .prop_map(move |(f, t, eps)| {
                        let mut fm = DMatrix::from_row_slice(n, n, &f);
                        for i in 0..n {
                            fm[(i, i)] += 5.0;
                        }
                        let tm = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { t[i * n + j] });
                        (
                            FlowMatrix::from_matrix(fm).unwrap(),
                            CounterfactualSpec::new(tm).unwrap(),
                            eps,
                        )
                    })
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn solution_satisfies_system((f, spec, eps) in world()) {
                let eq = solve_counterfactual(&f, &spec, eps, &SolverOptions::default()).unwrap();
                let defect = income_defect(&f, &spec, eps, &eq.y_prop).unwrap();
                prop_assert!(defect <= 1e-10);
                prop_assert!(eq.y_prop.iter().all(|y| *y > 0.0));
                let agg = derive_aggregates(&f).unwrap();
                for j in 0..f.n() {
                    let s: f64 = (0..f.n()).map(|i| eq.lambda_prop[(i, j)] * agg.shares[(i, j)]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-8);
                }
                let world: f64 = agg.income.iter().sum();
                let cf: f64 = eq.y_prop.iter().zip(&agg.income).map(|(a, b)| a * b).sum();
                prop_assert!((cf - world).abs() < 1e-9 * world);
            }

            #[test]
            fn scale_invariance((f, spec, eps) in world(), c in 0.01f64..100.0) {
                let o = SolverOptions::default();
                let a = solve_counterfactual(&f, &spec, eps, &o).unwrap();
                let b = solve_counterfactual(&f.scaled(c).unwrap(), &spec, eps, &o).unwrap();
                for (x, y) in a.welfare_prop.iter().zip(&b.welfare_prop) {
                    prop_assert!((x - y).abs() < 1e-8);
                }
                for (x, y) in a.y_prop.iter().zip(&b.y_prop) {
                    prop_assert!((x - y).abs() < 1e-8);
                }
            }

            #[test]
            fn normalization_cancels_in_welfare((f, spec, eps) in world(), k in 0.5f64..2.0) {
                // rescaling y' by a constant leaves lambda' and W unchanged
                let eq = solve_counterfactual(&f, &spec, eps, &SolverOptions::default()).unwrap();
                let agg = derive_aggregates(&f).unwrap();
                let log_tau = spec.values().map(f64::ln);
                let x: Vec<f64> = eq.y_prop.iter().map(|y| (y * k).ln()).collect();
                let lp = share_changes(&agg, &log_tau, &x, eps);
                for i in 0..f.n() {
                    prop_assert!((lp[(i, i)].powf(-1.0 / eps) - eq.welfare_prop[i]).abs() < 1e-10);
                }
            }
        }
    }
}
