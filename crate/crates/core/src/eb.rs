//! Empirical-Bayes measurement-error model for non-negative flows.
//!
//! True flows follow a spike-and-slab prior: zero with probability `p`,
//! otherwise log-normal around a gravity mean `mu` with variance `s2`. A
//! positive true flow is reported as zero with probability `b`, and
//! otherwise with multiplicative log-normal noise of variance `sigma2`.
//! The posterior of the true flow given the report is again spike-and-slab
//! and is sampled in closed form.
//!
//! Two calibration regimes are provided: a baseline that takes the noise
//! variance and zero probabilities as known, and a mirror-panel regime that
//! estimates everything from two independent reports per dyad and period.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fe::FeProjector;
use crate::gravity::{fit_log_gravity, fit_log_gravity_masked, GravitySummary};
use crate::model::{DistanceMatrix, FlowMatrix};

/// Floor applied to both variances before forming posterior weights.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Prior and likelihood parameters of one dyad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DyadParams {
    pub p: f64,
    pub b: f64,
    /// Prior log mean; NaN when undefined.
    pub mu: f64,
    pub s2: f64,
    pub sigma2: f64,
}

/// Posterior probability that an observed zero is a true zero.
pub fn spike_probability(p: f64, b: f64) -> Option<f64> {
    let denom = p + b * (1.0 - p);
    if denom > 0.0 {
        Some(p / denom)
    } else {
        None
    }
}

/// Log-scale posterior mean and variance for a positive report, together
/// with the weight on the report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPosterior {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

pub fn log_posterior(f_obs: f64, params: &DyadParams) -> LogPosterior {
    let s2 = params.s2.max(VARIANCE_FLOOR);
    let sigma2 = params.sigma2.max(VARIANCE_FLOOR);
    let weight = s2 / (s2 + sigma2);
    LogPosterior {
        weight,
        mean: weight * f_obs.ln() + (1.0 - weight) * params.mu,
        variance: 1.0 / (1.0 / s2 + 1.0 / sigma2),
    }
}

/// Outcome of one posterior draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorDraw {
    pub value: f64,
    /// The zero model was degenerate (`p = b = 0`, or no prior mean for a
    /// slab draw) and the flow was treated as a true zero.
    pub degenerate: bool,
}

/// Draws the true flow given its report.
///
/// A dyad with `sigma2 == 0` is measured without error and a positive
/// report is returned unchanged.
pub fn posterior_draw<R: Rng + ?Sized>(f_obs: f64, params: &DyadParams, rng: &mut R) -> Result<PosteriorDraw> {
    if !(f_obs.is_finite() && f_obs >= 0.0) {
        return Err(Error::InvalidInput(format!("observed flow {f_obs} is not a valid flow")));
    }
    if !(0.0..=1.0).contains(&params.p) || !(0.0..=1.0).contains(&params.b) {
        return Err(Error::InvalidInput("zero probabilities must lie in [0, 1]".into()));
    }
    if params.s2 < 0.0 || params.sigma2 < 0.0 {
        return Err(Error::InvalidInput("variances must be non-negative".into()));
    }
    if f_obs > 0.0 {
        if params.sigma2 == 0.0 {
            return Ok(PosteriorDraw { value: f_obs, degenerate: false });
        }
        if params.mu.is_nan() {
            return Err(Error::InvalidInput("positive report without a prior mean".into()));
        }
        let post = log_posterior(f_obs, params);
        let z: f64 = rng.sample(StandardNormal);
        return Ok(PosteriorDraw {
            value: (post.mean + post.variance.sqrt() * z).exp(),
            degenerate: false,
        });
    }
    let Some(q) = spike_probability(params.p, params.b) else {
        return Ok(PosteriorDraw { value: 0.0, degenerate: true });
    };
    let u: f64 = rng.random();
    if u < q {
        return Ok(PosteriorDraw { value: 0.0, degenerate: false });
    }
    if params.mu.is_nan() {
        return Ok(PosteriorDraw { value: 0.0, degenerate: true });
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok(PosteriorDraw {
        value: (params.mu + params.s2.max(0.0).sqrt() * z).exp(),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Baseline,
    Mirror,
}

/// Calibrated prior and measurement-error parameters for one cross-section.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedParams {
    pub labels: Vec<String>,
    pub regime: Regime,
    pub period: Option<i64>,
    pub p: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// NaN where undefined.
    pub mu: DMatrix<f64>,
    pub s2: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
    pub s2_shrunk: Option<DMatrix<f64>>,
    pub sigma2_shrunk: Option<DMatrix<f64>>,
    pub gravity: Option<GravitySummary>,
}

impl CalibratedParams {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Parameters used for posterior draws: shrunk variances when present.
    pub fn dyad(&self, i: usize, j: usize) -> DyadParams {
        DyadParams {
            p: self.p[(i, j)],
            b: self.b[(i, j)],
            mu: self.mu[(i, j)],
            s2: self.s2_shrunk.as_ref().map_or(self.s2[(i, j)], |m| m[(i, j)]),
            sigma2: self.sigma2_shrunk.as_ref().map_or(self.sigma2[(i, j)], |m| m[(i, j)]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        for m in [&self.p, &self.b, &self.mu, &self.s2, &self.sigma2]
            .into_iter()
            .chain(self.s2_shrunk.iter())
            .chain(self.sigma2_shrunk.iter())
        {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::ShapeMismatch("parameter matrices must be n x n".into()));
            }
        }
        if self.p.iter().chain(self.b.iter()).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("probabilities must lie in [0, 1]".into()));
        }
        if self.s2.iter().chain(self.sigma2.iter()).any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("variances must be non-negative".into()));
        }
        Ok(())
    }

    /// Draws a full matrix of true flows given the observed one. Returns the
    /// draw and the number of degenerate zero dyads.
    pub fn draw_flows<R: Rng + ?Sized>(&self, observed: &FlowMatrix, rng: &mut R) -> Result<(FlowMatrix, usize)> {
        let n = observed.n();
        if n != self.n() {
            return Err(Error::ShapeMismatch("parameters and flows differ in size".into()));
        }
        let mut out = DMatrix::zeros(n, n);
        let mut degenerate = 0;
        for j in 0..n {
            for i in 0..n {
                let d = posterior_draw(observed.get(i, j), &self.dyad(i, j), rng)?;
                degenerate += d.degenerate as usize;
                out[(i, j)] = d.value;
            }
        }
        Ok((observed.with_values(out)?, degenerate))
    }

    pub fn to_json(&self) -> String {
        let num = |v: f64| if v.is_finite() { Some(v) } else { None };
        let mut dyads = BTreeMap::new();
        let n = self.n();
        for i in 0..n {
            for j in 0..n {
                dyads.insert(
                    format!("{}->{}", self.labels[i], self.labels[j]),
                    DyadRecord {
                        origin: self.labels[i].clone(),
                        destination: self.labels[j].clone(),
                        p: self.p[(i, j)],
                        b: self.b[(i, j)],
                        mu: num(self.mu[(i, j)]),
                        s2: self.s2[(i, j)],
                        sigma2: self.sigma2[(i, j)],
                        s2_shrunk: self.s2_shrunk.as_ref().map(|m| m[(i, j)]),
                        sigma2_shrunk: self.sigma2_shrunk.as_ref().map(|m| m[(i, j)]),
                    },
                );
            }
        }
        let file = ParamsFile {
            regime: self.regime,
            period: self.period,
            labels: self.labels.clone(),
            gravity: self.gravity.clone(),
            dyads,
        };
        serde_json::to_string_pretty(&file).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParamsFile =
            serde_json::from_str(text).map_err(|e| Error::Parse { row: e.line(), message: e.to_string() })?;
        let n = file.labels.len();
        let index: HashMap<&str, usize> = file.labels.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
        let mut p = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, n);
        let mut mu = DMatrix::from_element(n, n, f64::NAN);
        let mut s2 = DMatrix::zeros(n, n);
        let mut sigma2 = DMatrix::zeros(n, n);
        let mut s2_shrunk = DMatrix::zeros(n, n);
        let mut sigma2_shrunk = DMatrix::zeros(n, n);
        let (mut has_s2s, mut has_sig2s) = (false, false);
        for rec in file.dyads.values() {
            let lookup = |l: &str| {
                index
                    .get(l)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("unknown label {l:?} in parameters")))
            };
            let (i, j) = (lookup(&rec.origin)?, lookup(&rec.destination)?);
            p[(i, j)] = rec.p;
            b[(i, j)] = rec.b;
            mu[(i, j)] = rec.mu.unwrap_or(f64::NAN);
            s2[(i, j)] = rec.s2;
            sigma2[(i, j)] = rec.sigma2;
            if let Some(v) = rec.s2_shrunk {
                s2_shrunk[(i, j)] = v;
                has_s2s = true;
            }
            if let Some(v) = rec.sigma2_shrunk {
                sigma2_shrunk[(i, j)] = v;
                has_sig2s = true;
            }
        }
        let out = Self {
            labels: file.labels,
            regime: file.regime,
            period: file.period,
            p,
            b,
            mu,
            s2,
            sigma2,
            s2_shrunk: has_s2s.then_some(s2_shrunk),
            sigma2_shrunk: has_sig2s.then_some(sigma2_shrunk),
            gravity: file.gravity,
        };
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DyadRecord {
    origin: String,
    destination: String,
    p: f64,
    b: f64,
    mu: Option<f64>,
    s2: f64,
    sigma2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s2_shrunk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma2_shrunk: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsFile {
    regime: Regime,
    period: Option<i64>,
    labels: Vec<String>,
    gravity: Option<GravitySummary>,
    dyads: BTreeMap<String, DyadRecord>,
}

/// `max(residual_variance - sigma2, 0)`.
pub fn prior_variance(residual_variance: f64, sigma2: f64) -> f64 {
    (residual_variance - sigma2).max(0.0)
}

/// Baseline calibration with a known common noise variance.
///
/// Prior means come from the log-linear gravity fit on positive flows; the
/// common prior variance is the residual variance net of noise, truncated
/// at zero. Zero probabilities default to zero when not supplied. The
/// diagonal is treated as measured without error.
pub fn calibrate_baseline(
    flows_obs: &FlowMatrix,
    distances: &DistanceMatrix,
    sigma2_common: f64,
    p: Option<&DMatrix<f64>>,
    b: Option<&DMatrix<f64>>,
) -> Result<CalibratedParams> {
    if !(sigma2_common >= 0.0 && sigma2_common.is_finite()) {
        return Err(Error::InvalidInput("noise variance must be a non-negative number".into()));
    }
    let n = flows_obs.n();
    let fit = fit_log_gravity(flows_obs, distances)?;
    let s2 = prior_variance(fit.residual_variance, sigma2_common);
    let off = |v: f64| DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { v });
    let pick = |m: Option<&DMatrix<f64>>| -> Result<DMatrix<f64>> {
        match m {
            Some(m) if m.nrows() == n && m.ncols() == n => {
                Ok(DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { m[(i, j)] }))
            }
            Some(_) => Err(Error::ShapeMismatch("zero probabilities must be n x n".into())),
            None => Ok(DMatrix::zeros(n, n)),
        }
    };
    let out = CalibratedParams {
        labels: flows_obs.labels().to_vec(),
        regime: Regime::Baseline,
        period: None,
        p: pick(p)?,
        b: pick(b)?,
        mu: fit.fitted.clone(),
        s2: off(s2),
        sigma2: off(sigma2_common),
        s2_shrunk: None,
        sigma2_shrunk: None,
        gravity: Some(fit.summary()),
    };
    out.validate()?;
    Ok(out)
}

/// Two noisy reports per off-diagonal dyad and period. Missing reports are
/// NaN until [`MirrorPanel::resolve_missing`] runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorPanel {
    pub labels: Vec<String>,
    pub years: Vec<i64>,
    pub report1: Vec<DMatrix<f64>>,
    pub report2: Vec<DMatrix<f64>>,
}

/// What the missing-value rules changed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NaReport {
    /// Dyads whose all-missing report was replaced by the other report.
    pub dyads_copied: usize,
    /// Remaining missing entries set to zero.
    pub entries_zeroed: usize,
}

impl MirrorPanel {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn periods(&self) -> usize {
        self.years.len()
    }

    /// Where, for every period, one report is positive and the other is
    /// missing, copy the positive report; then set remaining gaps to zero.
    pub fn resolve_missing(&mut self) -> NaReport {
        let n = self.n();
        let t_max = self.periods();
        let mut report = NaReport::default();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let all_pos = |r: &Vec<DMatrix<f64>>| (0..t_max).all(|t| r[t][(i, j)] > 0.0);
                let all_na = |r: &Vec<DMatrix<f64>>| (0..t_max).all(|t| r[t][(i, j)].is_nan());
                if all_pos(&self.report1) && all_na(&self.report2) {
                    for t in 0..t_max {
                        self.report2[t][(i, j)] = self.report1[t][(i, j)];
                    }
                    report.dyads_copied += 1;
                } else if all_pos(&self.report2) && all_na(&self.report1) {
                    for t in 0..t_max {
                        self.report1[t][(i, j)] = self.report2[t][(i, j)];
                    }
                    report.dyads_copied += 1;
                }
            }
        }
        for r in self.report1.iter_mut().chain(self.report2.iter_mut()) {
            for i in 0..n {
                for j in 0..n {
                    if i != j && r[(i, j)].is_nan() {
                        r[(i, j)] = 0.0;
                        report.entries_zeroed += 1;
                    }
                }
            }
        }
        report
    }

    fn period_index(&self, year: i64) -> Result<usize> {
        self.years
            .iter()
            .position(|y| *y == year)
            .ok_or_else(|| Error::InvalidInput(format!("year {year} not in panel")))
    }

    /// The first report for `year` as a flow matrix. The diagonal comes from
    /// `own_flows` (zero when absent).
    pub fn observed_flows(&self, year: i64, own_flows: Option<&[f64]>) -> Result<FlowMatrix> {
        let t = self.period_index(year)?;
        let n = self.n();
        if own_flows.is_some_and(|o| o.len() != n) {
            return Err(Error::ShapeMismatch("own flows must have one entry per location".into()));
        }
        let m = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                own_flows.map_or(0.0, |o| o[i])
            } else {
                self.report1[t][(i, j)]
            }
        });
        FlowMatrix::new(self.labels.clone(), m)
    }
}

fn parse_field(raw: &str, row: usize) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        row,
        message: format!("not a number: {s:?}"),
    })?;
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::Parse {
            row,
            message: format!("flow must be non-negative, got {v}"),
        });
    }
    Ok(v)
}

/// Parses a mirror CSV (`origin,destination,year,flow_report1,flow_report2`,
/// empty field = missing) without resolving missing values.
pub fn parse_mirror_csv<R: Read>(reader: R) -> Result<MirrorPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 1, message: e.to_string() })?
        .clone();
    let expected = ["origin", "destination", "year", "flow_report1", "flow_report2"];
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 1,
            message: format!("missing column {name:?}; expected {}", expected.join(",")),
        })
    };
    let (c_o, c_d, c_y, c_1, c_2) = (col("origin")?, col("destination")?, col("year")?, col("flow_report1")?, col("flow_report2")?);
    let mut labels: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    let mut years = BTreeSet::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let mut id = |l: &str| -> usize {
            if let Some(&i) = index.get(l) {
                return i;
            }
            labels.push(l.to_string());
            index.insert(l.to_string(), labels.len() - 1);
            labels.len() - 1
        };
        let o = id(get(c_o));
        let d = id(get(c_d));
        if o == d {
            return Err(Error::Parse { row, message: "mirror panel has no own flows".into() });
        }
        let year: i64 = get(c_y).parse().map_err(|_| Error::Parse {
            row,
            message: format!("bad year {:?}", get(c_y)),
        })?;
        years.insert(year);
        rows.push((o, d, year, parse_field(get(c_1), row)?, parse_field(get(c_2), row)?));
    }
    if rows.is_empty() {
        return Err(Error::Parse { row: 1, message: "mirror panel is empty".into() });
    }
    let years: Vec<i64> = years.into_iter().collect();
    let n = labels.len();
    let mut report1 = vec![DMatrix::from_element(n, n, f64::NAN); years.len()];
    let mut report2 = report1.clone();
    for (o, d, year, r1, r2) in rows {
        let t = years.binary_search(&year).expect("year collected above");
        report1[t][(o, d)] = r1;
        report2[t][(o, d)] = r2;
    }
    Ok(MirrorPanel {
        labels,
        years,
        report1,
        report2,
    })
}

/// Reads a mirror CSV and applies the missing-value rules.
pub fn ingest_mirror_csv(path: &Path) -> Result<(MirrorPanel, NaReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut panel = parse_mirror_csv(file)?;
    let report = panel.resolve_missing();
    Ok((panel, report))
}

/// Shares of periods with two, one and no reported zeros.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroShares {
    pub z2: f64,
    pub z1: f64,
    pub z0: f64,
}

/// Inverts the zero-count model for `(p, b)`, including the boundary cases
/// where some share is exactly zero or one.
pub fn zero_probs_from_shares(z: ZeroShares) -> (f64, f64) {
    let ZeroShares { z2, z1, z0 } = z;
    let inside = |v: f64| v > 0.0 && v < 1.0;
    if z2 >= 1.0 {
        (1.0, 0.0)
    } else if z1 >= 1.0 {
        (0.0, 0.5)
    } else if z0 >= 1.0 {
        (0.0, 0.0)
    } else if inside(z2) && inside(z1) && z0 <= 0.0 {
        (z2, z1)
    } else if inside(z2) && z1 <= 0.0 && inside(z0) {
        (z2, 0.0)
    } else if z2 <= 0.0 && inside(z1) && inside(z0) {
        (0.0, z1 / (2.0 - z1))
    } else {
        let s = z1 + 2.0 * z0;
        ((1.0 - s * s / (4.0 * z0)).max(0.0), z1 / s)
    }
}

fn zero_shares(panel: &MirrorPanel, i: usize, j: usize) -> ZeroShares {
    let t = panel.periods() as f64;
    let (mut c2, mut c1, mut c0) = (0.0, 0.0, 0.0);
    for (r1, r2) in panel.report1.iter().zip(&panel.report2) {
        match (r1[(i, j)] > 0.0, r2[(i, j)] > 0.0) {
            (false, false) => c2 += 1.0,
            (true, true) => c0 += 1.0,
            _ => c1 += 1.0,
        }
    }
    ZeroShares {
        z2: c2 / t,
        z1: c1 / t,
        z0: c0 / t,
    }
}

/// Per-dyad `(p, b)` estimates; the diagonal is zero.
pub fn estimate_zero_probs(panel: &MirrorPanel) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = panel.n();
    let mut p = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let (pp, bb) = zero_probs_from_shares(zero_shares(panel, i, j));
                p[(i, j)] = pp;
                b[(i, j)] = bb;
            }
        }
    }
    (p, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeVariance {
    pub sigma2: DMatrix<f64>,
    /// No period with both reports positive; the estimate is zero.
    pub unidentified: DMatrix<bool>,
}

/// Half the mean squared log gap between the two reports over periods in
/// which both are positive.
pub fn estimate_me_variance(panel: &MirrorPanel) -> MeVariance {
    let n = panel.n();
    let mut sigma2 = DMatrix::zeros(n, n);
    let mut unidentified = DMatrix::from_element(n, n, false);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (mut count, mut sum) = (0usize, 0.0);
            for (r1, r2) in panel.report1.iter().zip(&panel.report2) {
                let (a, b) = (r1[(i, j)], r2[(i, j)]);
                if a > 0.0 && b > 0.0 {
                    count += 1;
                    sum += (a.ln() - b.ln()).powi(2);
                }
            }
            if count == 0 {
                unidentified[(i, j)] = true;
            } else {
                sigma2[(i, j)] = 0.5 * sum / count as f64;
            }
        }
    }
    MeVariance { sigma2, unidentified }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorMeans {
    /// One matrix per period; NaN where the dyad is never positive.
    pub mu: Vec<DMatrix<f64>>,
    pub undefined: DMatrix<bool>,
    pub fits: Vec<GravitySummary>,
}

/// Within-period gravity fits on the first report. Positive dyad-periods
/// take their own period's fitted value; zero dyad-periods take the average
/// fitted value over the dyad's positive periods.
pub fn estimate_prior_means(panel: &MirrorPanel, distances: &DistanceMatrix) -> Result<PriorMeans> {
    let n = panel.n();
    if distances.n() != n {
        return Err(Error::ShapeMismatch("distances do not match the panel".into()));
    }
    let log_dist = distances.values().map(|d| d.ln());
    let mut fitted = Vec::with_capacity(panel.periods());
    let mut fits = Vec::with_capacity(panel.periods());
    for (t, r1) in panel.report1.iter().enumerate() {
        let mask = DMatrix::from_fn(n, n, |i, j| i != j && r1[(i, j)] > 0.0);
        let log_y = r1.map(|v| if v > 0.0 { v.ln() } else { f64::NAN });
        let fit = fit_log_gravity_masked(&log_y, &mask, &log_dist).map_err(|e| match e {
            Error::InsufficientData(m) => Error::InsufficientData(format!("period {}: {m}", panel.years[t])),
            other => other,
        })?;
        fits.push(fit.summary());
        fitted.push(fit.fitted);
    }
    let mut mu = vec![DMatrix::from_element(n, n, f64::NAN); panel.periods()];
    let mut undefined = DMatrix::from_element(n, n, false);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let positive: Vec<usize> = (0..panel.periods()).filter(|&t| panel.report1[t][(i, j)] > 0.0).collect();
            if positive.is_empty() {
                undefined[(i, j)] = true;
                continue;
            }
            let avg = positive.iter().map(|&t| fitted[t][(i, j)]).sum::<f64>() / positive.len() as f64;
            for t in 0..panel.periods() {
                mu[t][(i, j)] = if panel.report1[t][(i, j)] > 0.0 { fitted[t][(i, j)] } else { avg };
            }
        }
    }
    Ok(PriorMeans { mu, undefined, fits })
}

/// Per-dyad `max(Var_t(log F1 - mu_t | F1 > 0) - sigma2, 0)` with the 1/N
/// variance. Dyads never positive get zero.
pub fn estimate_prior_variances(panel: &MirrorPanel, mu: &[DMatrix<f64>], sigma2: &DMatrix<f64>) -> DMatrix<f64> {
    let n = panel.n();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return 0.0;
        }
        let resid: Vec<f64> = (0..panel.periods())
            .filter(|&t| panel.report1[t][(i, j)] > 0.0 && mu[t][(i, j)].is_finite())
            .map(|t| panel.report1[t][(i, j)].ln() - mu[t][(i, j)])
            .collect();
        if resid.is_empty() {
            return 0.0;
        }
        let m = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / resid.len() as f64;
        prior_variance(var, sigma2[(i, j)])
    })
}

/// Replaces a variance matrix by `exp(a_i + c_j)` fitted on the log of its
/// strictly positive off-diagonal entries.
pub fn shrink_variance(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = v.nrows();
    let mask = DMatrix::from_fn(n, n, |i, j| i != j && v[(i, j)] > 0.0);
    let weights = mask.map(|m| if m { 1.0 } else { 0.0 });
    let proj = FeProjector::new(weights)
        .map_err(|e| Error::InsufficientData(format!("cannot shrink variances: {e}")))?;
    let logs = DMatrix::from_fn(n, n, |i, j| if mask[(i, j)] { v[(i, j)].ln() } else { 0.0 });
    let (a, c) = proj.fit(&logs);
    Ok(DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { (a[i] + c[j]).exp() }))
}

/// Shrinks both the noise and prior variance estimates.
pub fn shrink_variances(sigma2: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok((shrink_variance(sigma2)?, shrink_variance(s2)?))
}

/// Every estimate from a mirror panel.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorCalibration {
    pub labels: Vec<String>,
    pub years: Vec<i64>,
    pub p: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma2: MeVariance,
    pub means: PriorMeans,
    pub s2: DMatrix<f64>,
    pub sigma2_shrunk: Option<DMatrix<f64>>,
    pub s2_shrunk: Option<DMatrix<f64>>,
}

pub fn calibrate_mirror(panel: &MirrorPanel, distances: &DistanceMatrix, shrink: bool) -> Result<MirrorCalibration> {
    let (p, b) = estimate_zero_probs(panel);
    let sigma2 = estimate_me_variance(panel);
    let means = estimate_prior_means(panel, distances)?;
    let s2 = estimate_prior_variances(panel, &means.mu, &sigma2.sigma2);
    let (sigma2_shrunk, s2_shrunk) = if shrink {
        let (a, b) = shrink_variances(&sigma2.sigma2, &s2)?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    Ok(MirrorCalibration {
        labels: panel.labels.clone(),
        years: panel.years.clone(),
        p,
        b,
        sigma2,
        means,
        s2,
        sigma2_shrunk,
        s2_shrunk,
    })
}

impl MirrorCalibration {
    /// Parameters for one period's cross-section. Own flows are not in the
    /// panel and are treated as measured without error.
    pub fn params_for_period(&self, year: i64) -> Result<CalibratedParams> {
        let t = self
            .years
            .iter()
            .position(|y| *y == year)
            .ok_or_else(|| Error::InvalidInput(format!("year {year} not in panel")))?;
        Ok(CalibratedParams {
            labels: self.labels.clone(),
            regime: Regime::Mirror,
            period: Some(year),
            p: self.p.clone(),
            b: self.b.clone(),
            mu: self.means.mu[t].clone(),
            s2: self.s2.clone(),
            sigma2: self.sigma2.sigma2.clone(),
            s2_shrunk: self.s2_shrunk.clone(),
            sigma2_shrunk: self.sigma2_shrunk.clone(),
            gravity: Some(self.means.fits[t].clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dyad(p: f64, b: f64, mu: f64, s2: f64, sigma2: f64) -> DyadParams {
        DyadParams { p, b, mu, s2, sigma2 }
    }

    #[test]
    fn traffic_shrinkage_anchor() {
        let post = log_posterior(std::f64::consts::E, &dyad(0.0, 0.0, 0.0, 0.101, 0.05));
        assert!((post.weight - 0.669).abs() < 5e-4);
        assert!((post.variance - 0.033).abs() < 5e-4);
        assert!((post.mean - post.weight).abs() < 1e-15);
        assert!((prior_variance(0.151, 0.05) - 0.101).abs() < 1e-12);
    }

    #[test]
    fn truncation_branches() {
        assert_eq!(prior_variance(0.04, 0.05), 0.0);
        assert_eq!(prior_variance(0.04, 0.0), 0.04);
    }

    #[test]
    fn no_noise_limit_concentrates_on_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = dyad(0.0, 0.0, 1.0, 0.2, 1e-12);
        for _ in 0..100 {
            let v = posterior_draw(5.0, &d, &mut rng).unwrap().value;
            assert!((v / 5.0 - 1.0).abs() < 1e-4);
        }
        let exact = dyad(0.0, 0.0, f64::NAN, 0.0, 0.0);
        assert_eq!(posterior_draw(5.0, &exact, &mut rng).unwrap().value, 5.0);
    }

    #[test]
    fn degenerate_zero_model_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = posterior_draw(0.0, &dyad(0.0, 0.0, 1.0, 0.1, 0.1), &mut rng).unwrap();
        assert_eq!(d, PosteriorDraw { value: 0.0, degenerate: true });
        let true_zero = posterior_draw(0.0, &dyad(1.0, 0.3, 1.0, 0.1, 0.1), &mut rng).unwrap();
        assert_eq!(true_zero, PosteriorDraw { value: 0.0, degenerate: false });
        assert!(posterior_draw(-1.0, &dyad(0.0, 0.0, 0.0, 0.1, 0.1), &mut rng).is_err());
    }

    #[test]
    fn spike_weight_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = dyad(0.3, 0.2, 0.0, 0.1, 0.1);
        let zeros = (0..100_000)
            .filter(|_| posterior_draw(0.0, &d, &mut rng).unwrap().value == 0.0)
            .count() as f64
            / 1e5;
        let expect: f64 = 0.3 / (0.3 + 0.2 * 0.7);
        assert!((expect - 0.682).abs() < 1e-3);
        assert!((zeros - expect).abs() < 0.01, "{zeros}");
    }

    #[test]
    fn zero_prob_boundary_cases() {
        let z = |z2, z1, z0| zero_probs_from_shares(ZeroShares { z2, z1, z0 });
        assert_eq!(z(1.0, 0.0, 0.0), (1.0, 0.0));
        assert_eq!(z(0.0, 1.0, 0.0), (0.0, 0.5));
        assert_eq!(z(0.0, 0.0, 1.0), (0.0, 0.0));
        assert_eq!(z(0.3, 0.7, 0.0), (0.3, 0.7));
        assert_eq!(z(0.4, 0.0, 0.6), (0.4, 0.0));
        assert_eq!(z(0.0, 0.4, 0.6), (0.0, 0.4 / 1.6));
        assert_eq!(z(0.25, 0.5, 0.25), (0.0, 0.5));
    }

    #[test]
    fn case_six_matches_forward_model() {
        // b = 0.25, p = 0: conditional on fewer than two zeros the shares are
        // 2b/(1+b) and (1-b)/(1+b)
        let b: f64 = 0.25;
        assert!((2.0 * b / (1.0 + b) - 0.4).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut one, mut none, mut kept) = (0.0, 0.0, 0.0);
        for _ in 0..100_000 {
            let zeros = (rng.random::<f64>() < b) as u8 + (rng.random::<f64>() < b) as u8;
            if zeros < 2 {
                kept += 1.0;
                if zeros == 1 { one += 1.0 } else { none += 1.0 }
            }
        }
        let (pp, bb) = zero_probs_from_shares(ZeroShares { z2: 0.0, z1: one / kept, z0: none / kept });
        assert_eq!(pp, 0.0);
        assert!((bb - 0.25).abs() < 0.01);
    }

    fn panel_from(r1: Vec<Vec<f64>>, r2: Vec<Vec<f64>>) -> MirrorPanel {
        // a single dyad (0 -> 1) across periods
        let t = r1.len();
        let mk = |v: &Vec<f64>| {
            let mut m = DMatrix::from_element(2, 2, 0.0);
            m[(0, 1)] = v[0];
            m[(1, 0)] = v[1];
            m
        };
        MirrorPanel {
            labels: vec!["a".into(), "b".into()],
            years: (0..t as i64).collect(),
            report1: r1.iter().map(mk).collect(),
            report2: r2.iter().map(mk).collect(),
        }
    }

    #[test]
    fn me_variance_cases() {
        let same = panel_from(vec![vec![2.0, 3.0]; 4], vec![vec![2.0, 3.0]; 4]);
        let v = estimate_me_variance(&same);
        assert_eq!(v.sigma2[(0, 1)], 0.0);
        assert!(!v.unidentified[(0, 1)]);
        let gap = 0.2f64.exp();
        let r1: Vec<Vec<f64>> = (0..5).map(|t| vec![gap * (t + 1) as f64, 1.0]).collect();
        let r2: Vec<Vec<f64>> = (0..5).map(|t| vec![(t + 1) as f64, 0.0]).collect();
        let v = estimate_me_variance(&panel_from(r1.clone(), r2.clone()));
        assert!((v.sigma2[(0, 1)] - 0.02).abs() < 1e-12);
        assert!(v.unidentified[(1, 0)]);
        let swapped = estimate_me_variance(&panel_from(r2, r1));
        assert_eq!(swapped.sigma2, v.sigma2);
    }

    #[test]
    fn missing_value_rules() {
        let nan = f64::NAN;
        let mut p = panel_from(
            vec![vec![1.0, nan], vec![2.0, 4.0], vec![3.0, nan]],
            vec![vec![nan, 5.0], vec![nan, 6.0], vec![nan, nan]],
        );
        let r = p.resolve_missing();
        // dyad 0->1: report1 all positive, report2 all missing => copied
        assert_eq!(r.dyads_copied, 1);
        assert_eq!(p.report2[2][(0, 1)], 3.0);
        // dyad 1->0: scattered gaps zeroed (two in report1, one in report2)
        assert_eq!(r.entries_zeroed, 3);
        assert_eq!(p.report1[0][(1, 0)], 0.0);
        let mut clean = panel_from(vec![vec![1.0, 2.0]], vec![vec![1.5, 2.5]]);
        let before = clean.clone();
        assert_eq!(clean.resolve_missing(), NaReport::default());
        assert_eq!(clean, before);
    }

    #[test]
    fn parse_mirror_rows() {
        let csv = "origin,destination,year,flow_report1,flow_report2\n\
                   A,B,2001,1.5,\nB,A,2001,NA,2\nA,B,2000,1,1\n";
        let p = parse_mirror_csv(csv.as_bytes()).unwrap();
        assert_eq!(p.labels, vec!["A", "B"]);
        assert_eq!(p.years, vec![2000, 2001]);
        assert!(p.report2[1][(0, 1)].is_nan());
        assert_eq!(p.report2[1][(1, 0)], 2.0);
        assert!(p.report1[0][(1, 0)].is_nan());
        let bad = "origin,destination,year,flow_report1,flow_report2\nA,B,2001,x,1\n";
        assert_eq!(parse_mirror_csv(bad.as_bytes()).unwrap_err(), Error::Parse { row: 2, message: "not a number: \"x\"".into() });
    }

    #[test]
    fn shrink_exact_multiplicative_is_identity() {
        let n = 5;
        let v = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { (0.1 * i as f64 - 0.3 * j as f64).exp() * 0.05 });
        let s = shrink_variance(&v).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!((s[(i, j)] - v[(i, j)]).abs() < 1e-12);
            }
        }
        assert!(shrink_variance(&DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn params_json_roundtrip() {
        let n = 3;
        let params = CalibratedParams {
            labels: vec!["x".into(), "y".into(), "z".into()],
            regime: Regime::Baseline,
            period: None,
            p: DMatrix::from_element(n, n, 0.1),
            b: DMatrix::from_element(n, n, 0.2),
            mu: DMatrix::from_fn(n, n, |i, j| if i == j { f64::NAN } else { (i + j) as f64 }),
            s2: DMatrix::from_element(n, n, 0.05),
            sigma2: DMatrix::from_element(n, n, 0.03),
            s2_shrunk: None,
            sigma2_shrunk: Some(DMatrix::from_element(n, n, 0.04)),
            gravity: None,
        };
        let back = CalibratedParams::from_json(&params.to_json()).unwrap();
        assert_eq!(back.labels, params.labels);
        assert_eq!(back.sigma2_shrunk, params.sigma2_shrunk);
        assert!(back.mu[(0, 0)].is_nan());
        assert_eq!(back.mu[(0, 1)], 1.0);
        assert_eq!(back.dyad(0, 1).sigma2, 0.04);
    }
}
