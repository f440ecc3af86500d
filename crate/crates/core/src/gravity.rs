//! Gravity regressions: PPML elasticity estimation with dyadic-robust
//! variance, log-linear fixed-effects fits for the empirical-Bayes prior,
//! and sampling from the normal approximation to the parameter posterior.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fe::{regress, FeProjector};
use crate::model::{DistanceMatrix, EstimatorResult, FlowMatrix};

/// Fixed effects beyond this magnitude (on flows rescaled to unit mean)
/// signal separation.
const SEPARATION_BOUND: f64 = 30.0;

/// Log-linear gravity fit on positive off-diagonal flows.
#[derive(Debug, Clone, PartialEq)]
pub struct GravityFit {
    pub beta_hat: f64,
    pub fe_origin: Vec<f64>,
    pub fe_dest: Vec<f64>,
    /// Maximum-likelihood (1/N) residual variance.
    pub residual_variance: f64,
    pub adj_r2: f64,
    /// Fitted log means for every off-diagonal dyad; NaN on the diagonal.
    pub fitted: DMatrix<f64>,
    /// Residuals on the estimation sample; NaN elsewhere.
    pub residuals: DMatrix<f64>,
    pub included: DMatrix<bool>,
    pub n_obs: usize,
    /// Log flow and log distance with the fixed effects partialled out,
    /// for the estimation sample in column-major dyad order.
    pub partialled: Vec<(usize, usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GravitySummary {
    pub beta_hat: f64,
    pub adj_r2: f64,
    pub residual_variance: f64,
    pub n_obs: usize,
}

impl GravityFit {
    pub fn summary(&self) -> GravitySummary {
        GravitySummary {
            beta_hat: self.beta_hat,
            adj_r2: self.adj_r2,
            residual_variance: self.residual_variance,
            n_obs: self.n_obs,
        }
    }
}

/// Least squares of `log F` on `log dist` plus origin and destination
/// effects, using only positive off-diagonal flows.
pub fn fit_log_gravity(flows: &FlowMatrix, distances: &DistanceMatrix) -> Result<GravityFit> {
    if flows.n() != distances.n() {
        return Err(Error::ShapeMismatch("flows and distances differ in size".into()));
    }
    let n = flows.n();
    let log_flow = flows.values().map(|f| if f > 0.0 { f.ln() } else { f64::NAN });
    let mask = DMatrix::from_fn(n, n, |i, j| i != j && flows.get(i, j) > 0.0);
    let log_dist = distances.values().map(|d| d.ln());
    fit_log_gravity_masked(&log_flow, &mask, &log_dist)
}

/// Gravity fit on an arbitrary estimation sample. `log_y` is only read
/// where `mask` is true; `log_dist` must be finite off the diagonal.
pub fn fit_log_gravity_masked(
    log_y: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    log_dist: &DMatrix<f64>,
) -> Result<GravityFit> {
    let n = log_y.nrows();
    let weights = DMatrix::from_fn(n, n, |i, j| if mask[(i, j)] { 1.0 } else { 0.0 });
    let proj = FeProjector::new(weights)?;
    let y = DMatrix::from_fn(n, n, |i, j| if mask[(i, j)] { log_y[(i, j)] } else { 0.0 });
    let x = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { log_dist[(i, j)] });
    let reg = regress(&proj, &y, &x)?;

    let fitted = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            f64::NAN
        } else {
            reg.slope * x[(i, j)] + reg.orig[i] + reg.dest[j]
        }
    });
    let residuals = DMatrix::from_fn(n, n, |i, j| {
        if mask[(i, j)] {
            y[(i, j)] - fitted[(i, j)]
        } else {
            f64::NAN
        }
    });
    let n_obs = mask.iter().filter(|m| **m).count();
    let ssr: f64 = residuals.iter().filter(|r| !r.is_nan()).map(|r| r * r).sum();
    let y_mean = (0..n)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .filter(|&(i, j)| mask[(i, j)])
        .map(|(i, j)| y[(i, j)])
        .sum::<f64>()
        / n_obs as f64;
    let sst: f64 = (0..n)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .filter(|&(i, j)| mask[(i, j)])
        .map(|(i, j)| (y[(i, j)] - y_mean).powi(2))
        .sum();
    // slope + n origin + n destination effects, one redundant level
    let n_params = 2 * n;
    let adj_r2 = if sst > 0.0 && ssr <= 1e-24 * sst {
        1.0
    } else if sst > 0.0 && n_obs > n_params {
        1.0 - (ssr / sst) * (n_obs as f64 - 1.0) / (n_obs - n_params) as f64
    } else {
        f64::NAN
    };
    let mut partialled = Vec::with_capacity(n_obs);
    for j in 0..n {
        for i in 0..n {
            if mask[(i, j)] {
                partialled.push((i, j, reg.x_resid[(i, j)], reg.y_resid[(i, j)]));
            }
        }
    }
    Ok(GravityFit {
        beta_hat: reg.slope,
        fe_origin: reg.orig,
        fe_dest: reg.dest,
        residual_variance: ssr / n_obs as f64,
        adj_r2,
        fitted,
        residuals,
        included: mask.clone(),
        n_obs,
        partialled,
    })
}

/// PPML fit of `F_ij = exp(a_i + c_j - eps * log tau_ij)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PpmlFit {
    pub epsilon_hat: f64,
    pub fe_origin: Vec<f64>,
    pub fe_dest: Vec<f64>,
    /// Fitted means on included dyads, zero elsewhere.
    pub fitted: DMatrix<f64>,
    pub included: DMatrix<bool>,
    /// Per-dyad influence on the cost coefficient, leverage adjusted.
    pub scores: DMatrix<f64>,
    /// Dyadic-robust sampling variance of `epsilon_hat`.
    pub variance: f64,
    /// Whether the variance had to be projected to zero.
    pub projected: bool,
    pub iterations: usize,
    pub deviance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpmlSummary {
    pub epsilon_hat: f64,
    pub variance: f64,
    pub std_error: f64,
    pub projected: bool,
    pub iterations: usize,
}

impl PpmlFit {
    pub fn summary(&self) -> PpmlSummary {
        PpmlSummary {
            epsilon_hat: self.epsilon_hat,
            variance: self.variance,
            std_error: self.variance.sqrt(),
            projected: self.projected,
            iterations: self.iterations,
        }
    }

    pub fn estimator_result(&self) -> EstimatorResult {
        EstimatorResult {
            theta_hat: vec![self.epsilon_hat],
            sigma_hat: vec![vec![self.variance]],
            positive: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceKind {
    /// Pairs of dyads sharing a location are correlated.
    #[default]
    Dyadic,
    /// Heteroskedasticity-robust sandwich treating dyads as independent.
    Independent,
}

fn poisson_deviance(y: &DMatrix<f64>, mu: &DMatrix<f64>, mask: &DMatrix<bool>) -> f64 {
    let mut d = 0.0;
    for (k, m) in mask.iter().enumerate() {
        if *m {
            let (yy, mm) = (y[k], mu[k]);
            let t = if yy > 0.0 { yy * (yy / mm).ln() } else { 0.0 };
            d += 2.0 * (t - (yy - mm));
        }
    }
    d
}

/// Poisson pseudo-maximum likelihood with two-way fixed effects, solved by
/// iteratively reweighted least squares with step-halving.
///
/// Flows are rescaled to unit mean internally; only the destination effects
/// absorb the scale. The first origin effect is normalized to zero.
pub fn fit_ppml(
    flows: &FlowMatrix,
    log_costs: &DMatrix<f64>,
    include_diagonal: bool,
) -> Result<PpmlFit> {
    let n = flows.n();
    if log_costs.nrows() != n || log_costs.ncols() != n {
        return Err(Error::ShapeMismatch("log costs must match flows".into()));
    }
    let mask = DMatrix::from_fn(n, n, |i, j| include_diagonal || i != j);
    for i in 0..n {
        for j in 0..n {
            if mask[(i, j)] && !log_costs[(i, j)].is_finite() {
                return Err(Error::InvalidInput(format!("log cost ({i},{j}) is not finite")));
            }
        }
    }
    for k in 0..n {
        let row: f64 = (0..n).filter(|&j| mask[(k, j)]).map(|j| flows.get(k, j)).sum();
        let col: f64 = (0..n).filter(|&i| mask[(i, k)]).map(|i| flows.get(i, k)).sum();
        if row <= 0.0 {
            return Err(Error::Separation(format!("origin {k} has only zero flows")));
        }
        if col <= 0.0 {
            return Err(Error::Separation(format!("destination {k} has only zero flows")));
        }
    }
    let n_incl = mask.iter().filter(|m| **m).count() as f64;
    let scale = (0..n * n).filter(|&k| mask[k]).map(|k| flows.values()[k]).sum::<f64>() / n_incl;
    let y = DMatrix::from_fn(n, n, |i, j| if mask[(i, j)] { flows.get(i, j) / scale } else { 0.0 });
    let x = DMatrix::from_fn(n, n, |i, j| if mask[(i, j)] { log_costs[(i, j)] } else { 0.0 });

    let mut eta = y.map(|v| ((v + 1.0) / 2.0).ln());
    let mut mu = eta.map(f64::exp);
    let mut dev = poisson_deviance(&y, &mu, &mask);
    let mut params: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < 200 {
        iterations += 1;
        let weights = DMatrix::from_fn(n, n, |i, j| if mask[(i, j)] { mu[(i, j)] } else { 0.0 });
        let proj = FeProjector::new(weights)?;
        let z = DMatrix::from_fn(n, n, |i, j| {
            if mask[(i, j)] {
                eta[(i, j)] + (y[(i, j)] - mu[(i, j)]) / mu[(i, j)]
            } else {
                0.0
            }
        });
        let reg = regress(&proj, &z, &x)?;
        let target = DMatrix::from_fn(n, n, |i, j| reg.slope * x[(i, j)] + reg.orig[i] + reg.dest[j]);
        let mut step = 1.0;
        let mut new_params = (reg.slope, reg.orig.clone(), reg.dest.clone());
        let (mut new_eta, mut new_mu, mut new_dev);
        loop {
            new_eta = &eta + (&target - &eta) * step;
            new_mu = new_eta.map(f64::exp);
            new_dev = poisson_deviance(&y, &new_mu, &mask);
            if params.is_none()
                || (new_dev.is_finite() && new_dev <= dev * (1.0 + 1e-12) + 1e-300)
                || step < 1e-9
            {
                break;
            }
            step *= 0.5;
        }
        if step < 1.0 {
            if let Some((b0, a0, c0)) = &params {
                new_params = (
                    b0 + step * (reg.slope - b0),
                    a0.iter().zip(&reg.orig).map(|(o, t)| o + step * (t - o)).collect(),
                    c0.iter().zip(&reg.dest).map(|(o, t)| o + step * (t - o)).collect(),
                );
            }
        }
        if new_params
            .1
            .iter()
            .chain(&new_params.2)
            .any(|v| v.abs() > SEPARATION_BOUND)
        {
            return Err(Error::Separation("fixed effect diverged".into()));
        }
        let change = (dev - new_dev).abs() / (new_dev.abs() + 0.1);
        eta = new_eta;
        mu = new_mu;
        dev = new_dev;
        params = Some(new_params);
        if change < 1e-12 && iterations > 1 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations,
            residual: dev,
        });
    }
    let (slope, orig, mut dest) = params.expect("at least one iteration ran");
    for c in dest.iter_mut() {
        *c += scale.ln();
    }
    let fitted = DMatrix::from_fn(n, n, |i, j| if mask[(i, j)] { mu[(i, j)] * scale } else { 0.0 });
    let mut fit = PpmlFit {
        epsilon_hat: -slope,
        fe_origin: orig,
        fe_dest: dest,
        fitted,
        included: mask,
        scores: DMatrix::zeros(n, n),
        variance: 0.0,
        projected: false,
        iterations,
        deviance: dev * scale,
    };
    fit.scores = influence(&fit, flows, log_costs)?;
    let (v, projected) = meat(&fit.scores, &fit.included, VarianceKind::Dyadic);
    fit.variance = v;
    fit.projected = projected;
    Ok(fit)
}

/// Influence of each dyad on the cost coefficient:
/// `(F - mu) x~ / (h (1 - lev))`, where `x~` is the log cost with the fixed
/// effects partialled out under weights `mu`, `h = sum mu x~^2` is the
/// relevant Hessian entry and `lev` is the dyad's leverage in the full design.
fn influence(fit: &PpmlFit, flows: &FlowMatrix, log_costs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = flows.n();
    let mask = &fit.included;
    // Rescale weights for conditioning; the ratio below is scale free.
    let total: f64 = fit.fitted.sum();
    let weights = DMatrix::from_fn(n, n, |i, j| if mask[(i, j)] { fit.fitted[(i, j)] / total } else { 0.0 });
    let proj = FeProjector::new(weights)?;
    let x = DMatrix::from_fn(n, n, |i, j| if mask[(i, j)] { log_costs[(i, j)] } else { 0.0 });
    let xr = proj.residual(&x);
    let used = mask.iter().filter(|m| **m).count();
    if used <= 2 * n {
        return Err(Error::InsufficientData(format!(
            "{used} dyads leave no residual degrees of freedom for {} parameters",
            2 * n
        )));
    }
    let sxx = proj.dot(&xr, &xr);
    let h = sxx * total;
    if h <= 0.0 {
        return Err(Error::Collinear);
    }
    // Full-design leverage; residuals are inflated by 1/(1 - lev) to undo
    // the shrinkage from fitting 2n - 1 effects.
    let lev_fe = proj.leverage();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if !mask[(i, j)] {
            return 0.0;
        }
        let lev = lev_fe[(i, j)] + proj.weights()[(i, j)] * xr[(i, j)] * xr[(i, j)] / sxx;
        let keep = 1.0 - lev;
        if keep <= 1e-12 {
            return 0.0;
        }
        (flows.get(i, j) - fit.fitted[(i, j)]) * xr[(i, j)] / (h * keep)
    }))
}

/// Sum of influence cross-products. For the dyadic kind the pair
/// `(ij, kl)` contributes when `{i,j}` and `{k,l}` share a location.
fn meat(psi: &DMatrix<f64>, mask: &DMatrix<bool>, kind: VarianceKind) -> (f64, bool) {
    let n = psi.nrows();
    let v = match kind {
        VarianceKind::Independent => psi.iter().map(|p| p * p).sum(),
        VarianceKind::Dyadic => {
            let rows: Vec<f64> = (0..n).map(|i| psi.row(i).sum()).collect();
            let cols: Vec<f64> = (0..n).map(|j| psi.column(j).sum()).collect();
            let mut total = 0.0;
            for j in 0..n {
                for i in 0..n {
                    if !mask[(i, j)] {
                        continue;
                    }
                    let nodes: &[usize] = if i == j { &[i][..] } else { &[i, j][..] };
                    let mut s = 0.0;
                    for &k in nodes {
                        s += rows[k] + cols[k];
                    }
                    for &k in nodes {
                        for &l in nodes {
                            s -= psi[(k, l)];
                        }
                    }
                    total += psi[(i, j)] * s;
                }
            }
            total
        }
    };
    if v < 0.0 {
        (0.0, true)
    } else {
        (v, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub variance: f64,
    /// The raw estimate was negative and was projected to zero.
    pub projected: bool,
}

/// Dyadic-robust sandwich variance of the PPML elasticity.
pub fn dyadic_variance(fit: &PpmlFit, flows: &FlowMatrix, log_costs: &DMatrix<f64>) -> Result<VarianceEstimate> {
    sandwich_variance(fit, flows, log_costs, VarianceKind::Dyadic)
}

pub fn sandwich_variance(
    fit: &PpmlFit,
    flows: &FlowMatrix,
    log_costs: &DMatrix<f64>,
    kind: VarianceKind,
) -> Result<VarianceEstimate> {
    let psi = influence(fit, flows, log_costs)?;
    let (variance, projected) = meat(&psi, &fit.included, kind);
    Ok(VarianceEstimate {
        variance,
        projected,
    })
}

/// Lower-triangular `L` with `L L' = sigma` for a positive semidefinite
/// `sigma`; zero pivots leave their column empty.
pub fn psd_cholesky(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    let s = (sigma + sigma.transpose()) * 0.5;
    let scale = s.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut pivot = s[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot < -1e-10 * scale.max(1.0) {
            return Err(Error::NotPsd);
        }
        if pivot <= tol {
            for i in (j + 1)..d {
                let mut r = s[(i, j)];
                for k in 0..j {
                    r -= l[(i, k)] * l[(j, k)];
                }
                if r.abs() > 1e-8 * scale.max(1.0) {
                    return Err(Error::NotPsd);
                }
            }
            continue;
        }
        let root = pivot.sqrt();
        l[(j, j)] = root;
        for i in (j + 1)..d {
            let mut r = s[(i, j)];
            for k in 0..j {
                r -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = r / root;
        }
    }
    Ok(l)
}

/// One draw from `N(theta_hat, sigma_hat)`, or from the log-normal with
/// median `theta_hat` and delta-method matched spread when
/// `est.positive` is set.
pub fn sample_theta<R: Rng + ?Sized>(est: &EstimatorResult, rng: &mut R) -> Result<Vec<f64>> {
    let d = est.dim();
    let sigma = est.sigma_matrix();
    if est.positive {
        if est.theta_hat.iter().any(|t| *t <= 0.0) {
            return Err(Error::InvalidInput(
                "log-normal sampling needs a positive point estimate".into(),
            ));
        }
        let log_sigma = DMatrix::from_fn(d, d, |i, j| sigma[(i, j)] / (est.theta_hat[i] * est.theta_hat[j]));
        let l = psd_cholesky(&log_sigma)?;
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        Ok((0..d)
            .map(|i| {
                let shock: f64 = (0..=i).map(|k| l[(i, k)] * z[k]).sum();
                est.theta_hat[i] * shock.exp()
            })
            .collect())
    } else {
        let l = psd_cholesky(&sigma)?;
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        Ok((0..d)
            .map(|i| est.theta_hat[i] + (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>())
            .collect())
    }
}
