//! wasm bindings for the static demo page in `www/`. Every export takes
//! plain numbers or text and returns a JSON string; the `*_json` functions
//! hold the logic so they can be tested natively.

use flowuq::armington::{solve_counterfactual, welfare_change_pct, SolverOptions};
use flowuq::eb::{log_posterior, spike_probability, DyadParams};
use flowuq::model::{CounterfactualSpec, FlowMatrix};
use flowuq::robust::robust_interval_levels;
use nalgebra::DMatrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn to_json<T: Serialize>(v: &T) -> Out {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct LevelRow {
    c: f64,
    lower_level: f64,
    upper_level: f64,
}

/// Robust quantile levels for `c` on an even grid from 1 to `c_max`.
pub fn robust_levels_json(alpha: f64, c_max: f64, steps: usize) -> Out {
    if !(c_max >= 1.0) || steps == 0 {
        return Err("need c_max >= 1 and at least one step".into());
    }
    let rows = (0..=steps)
        .map(|k| {
            let c = 1.0 + (c_max - 1.0) * k as f64 / steps as f64;
            robust_interval_levels(alpha, c).map(|l| LevelRow {
                c,
                lower_level: l.lower_level,
                upper_level: l.upper_level,
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    to_json(&rows)
}

#[derive(Serialize)]
struct ShrinkRow {
    sigma2: f64,
    weight: f64,
    mean: f64,
    sd: f64,
}

#[derive(Serialize)]
struct Shrinkage {
    /// Probability that an observed zero is a true zero.
    spike: Option<f64>,
    curve: Vec<ShrinkRow>,
}

/// Posterior log-flow mean and spread as the measurement-error variance
/// rises from 0 to `sigma2_max`.
pub fn shrinkage_json(f_obs: f64, mu: f64, s2: f64, sigma2_max: f64, p: f64, b: f64, steps: usize) -> Out {
    if !(f_obs > 0.0) || !(s2 > 0.0) || !(sigma2_max >= 0.0) || steps == 0 {
        return Err("need a positive flow, positive prior variance and sigma2_max >= 0".into());
    }
    let curve = (0..=steps)
        .map(|k| {
            let sigma2 = sigma2_max * k as f64 / steps as f64;
            let post = log_posterior(f_obs, &DyadParams { p, b, mu, s2, sigma2 });
            ShrinkRow {
                sigma2,
                weight: post.weight,
                mean: post.mean,
                sd: post.variance.sqrt(),
            }
        })
        .collect();
    to_json(&Shrinkage {
        spike: spike_probability(p, b),
        curve,
    })
}

/// Parses a square matrix; rows by line, entries by commas or whitespace.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(r, line)| {
            line.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format!("row {}: {t:?} is not a number", r + 1)))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let n = rows.len();
    if n < 2 || rows.iter().any(|r| r.len() != n) {
        return Err(format!("expected a square matrix, got {n} rows of lengths {:?}", rows.iter().map(Vec::len).collect::<Vec<_>>()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

#[derive(Serialize)]
struct Welfare {
    welfare_pct: Vec<f64>,
    income_change: Vec<f64>,
    iterations: usize,
}

/// Welfare changes when every off-diagonal cost rises by the factor `tau`.
pub fn welfare_json(flows: &str, tau: f64, epsilon: f64) -> Out {
    let m = parse_matrix(flows)?;
    let n = m.nrows();
    let flows = FlowMatrix::from_matrix(m).map_err(|e| e.to_string())?;
    let spec = CounterfactualSpec::uniform_increase(n, tau - 1.0).map_err(|e| e.to_string())?;
    let eq = solve_counterfactual(&flows, &spec, epsilon, &SolverOptions::default()).map_err(|e| e.to_string())?;
    to_json(&Welfare {
        welfare_pct: welfare_change_pct(&eq),
        income_change: eq.y_prop.clone(),
        iterations: eq.iterations,
    })
}

#[wasm_bindgen]
pub fn robust_levels(alpha: f64, c_max: f64, steps: usize) -> Result<String, JsError> {
    robust_levels_json(alpha, c_max, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn shrinkage(f_obs: f64, mu: f64, s2: f64, sigma2_max: f64, p: f64, b: f64, steps: usize) -> Result<String, JsError> {
    shrinkage_json(f_obs, mu, s2, sigma2_max, p, b, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn welfare(flows: &str, tau: f64, epsilon: f64) -> Result<String, JsError> {
    welfare_json(flows, tau, epsilon).map_err(|e| JsError::new(&e))
}
