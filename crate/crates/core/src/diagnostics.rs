//! Model-adequacy checks for the gravity prior: standardized residuals
//! against the normal benchmark and the fixed-effects-partialled
//! flow-distance scatter.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::eb::CalibratedParams;
use crate::error::{Error, Result};
use crate::gravity::fit_log_gravity;
use crate::model::{DistanceMatrix, FlowMatrix};

/// Excess kurtosis above this is flagged as heavy tails.
pub const HEAVY_TAIL_KURTOSIS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// `bins` equal-width bins spanning the data range.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lower: lo + k as f64 * width,
            upper: lo + (k + 1) as f64 * width,
            count,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Kolmogorov-Smirnov distance to the standard normal.
    pub ks_distance: f64,
    pub heavy_tails: bool,
}

pub fn summarize(values: &[f64]) -> Option<ResidualSummary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let moment = |k: i32| values.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / nf;
    let variance = moment(2);
    let (skewness, excess_kurtosis) = if variance > 0.0 {
        (moment(3) / variance.powf(1.5), moment(4) / (variance * variance) - 3.0)
    } else {
        (0.0, 0.0)
    };
    let std_normal = Normal::standard();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let ks_distance = sorted
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let c = std_normal.cdf(*v);
            (c - k as f64 / nf).abs().max(((k + 1) as f64 / nf - c).abs())
        })
        .fold(0.0, f64::max);
    Some(ResidualSummary {
        count: n,
        mean,
        variance,
        skewness,
        excess_kurtosis,
        ks_distance,
        heavy_tails: excess_kurtosis > HEAVY_TAIL_KURTOSIS,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityDiagnostic {
    /// `(origin, destination, residual)` for positive off-diagonal flows.
    pub residuals: Vec<(usize, usize, f64)>,
    pub summary: Option<ResidualSummary>,
    pub histogram: Vec<HistogramBin>,
}

/// `(log F~ - mu) / sqrt(s2 + sigma2)` on positive off-diagonal flows with a
/// defined prior mean. Under the model these are standard normal.
pub fn normality_diagnostic(flows: &FlowMatrix, params: &CalibratedParams, bins: usize) -> Result<NormalityDiagnostic> {
    let n = flows.n();
    if params.n() != n {
        return Err(Error::ShapeMismatch("parameters and flows differ in size".into()));
    }
    let mut residuals = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let f = flows.get(i, j);
            let d = params.dyad(i, j);
            let scale = (d.s2 + d.sigma2).sqrt();
            if i != j && f > 0.0 && d.mu.is_finite() && scale > 0.0 {
                residuals.push((i, j, (f.ln() - d.mu) / scale));
            }
        }
    }
    let values: Vec<f64> = residuals.iter().map(|r| r.2).collect();
    Ok(NormalityDiagnostic {
        summary: summarize(&values),
        histogram: histogram(&values, bins),
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedMean {
    pub center: f64,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialPlot {
    /// Partialled log distance and log flow.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub bins: Vec<BinnedMean>,
}

/// Partialled scatter with its least-squares slope and binned means over
/// `bins` equal-width bins of the x range; empty bins are omitted.
pub fn gravity_partial_plot(flows: &FlowMatrix, distances: &DistanceMatrix, bins: usize) -> Result<PartialPlot> {
    let fit = fit_log_gravity(flows, distances)?;
    let points: Vec<(f64, f64)> = fit.partialled.iter().map(|p| (p.2, p.3)).collect();
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    let hist = histogram(&points.iter().map(|p| p.0).collect::<Vec<_>>(), bins);
    let mut sums = vec![(0.0, 0usize); hist.len()];
    if let Some(first) = hist.first() {
        let width = first.upper - first.lower;
        for (x, y) in &points {
            let k = (((x - first.lower) / width) as usize).min(hist.len() - 1);
            sums[k].0 += y;
            sums[k].1 += 1;
        }
    }
    let bins = hist
        .iter()
        .zip(sums)
        .filter(|(_, (_, c))| *c > 0)
        .map(|(h, (s, c))| BinnedMean {
            center: 0.5 * (h.lower + h.upper),
            mean: s / c as f64,
            count: c,
        })
        .collect();
    Ok(PartialPlot {
        points,
        slope: sxy / sxx,
        bins,
    })
}
