//! Bootstrap composition of the measurement-error posterior over flows and
//! the estimation-error posterior over parameters.
//!
//! Every draw `b` owns two ChaCha streams keyed by `(seed, b)`: one for the
//! flow draw and one for the parameter draw. Results therefore do not depend
//! on scheduling or worker count, and switching off measurement error leaves
//! the parameter draws untouched.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eb::CalibratedParams;
use crate::error::{Error, Result};
use crate::gravity::{fit_log_gravity, fit_ppml, sample_theta, sandwich_variance, VarianceKind};
use crate::model::{
    evaluate_model, CounterfactualSpec, DistanceMatrix, DrawSet, EstimatorResult, FlowMatrix, ModelFunction,
    Provenance,
};
use crate::robust::robust_interval_from;

/// Draws true flows given observed ones.
pub trait DataPosterior: Send + Sync {
    fn draw(&self, observed: &FlowMatrix, rng: &mut ChaCha8Rng) -> Result<DataDraw>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataDraw {
    pub flows: FlowMatrix,
    /// Observed zeros treated as true zeros because the zero model was
    /// degenerate.
    pub degenerate: usize,
}

impl DataPosterior for CalibratedParams {
    fn draw(&self, observed: &FlowMatrix, rng: &mut ChaCha8Rng) -> Result<DataDraw> {
        let (flows, degenerate) = self.draw_flows(observed, rng)?;
        Ok(DataDraw { flows, degenerate })
    }
}

/// Flows measured without error.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactData;

impl DataPosterior for ExactData {
    fn draw(&self, observed: &FlowMatrix, _rng: &mut ChaCha8Rng) -> Result<DataDraw> {
        Ok(DataDraw {
            flows: observed.clone(),
            degenerate: 0,
        })
    }
}

/// Maps a flow matrix to a point estimate and its sampling covariance.
pub trait Estimator: Send + Sync {
    fn estimate(&self, flows: &FlowMatrix) -> Result<EstimatorResult>;

    /// `false` when the estimate does not depend on the flows, so one
    /// estimate is reused for every draw.
    fn data_dependent(&self) -> bool {
        true
    }
}

impl<F> Estimator for F
where
    F: Fn(&FlowMatrix) -> Result<EstimatorResult> + Send + Sync,
{
    fn estimate(&self, flows: &FlowMatrix) -> Result<EstimatorResult> {
        self(flows)
    }
}

/// PPML elasticity with a sandwich variance, `theta = [eps]`.
#[derive(Debug, Clone)]
pub struct PpmlEstimator {
    pub log_costs: DMatrix<f64>,
    pub include_diagonal: bool,
    pub variance: VarianceKind,
}

impl PpmlEstimator {
    pub fn new(log_costs: DMatrix<f64>) -> Self {
        Self {
            log_costs,
            include_diagonal: false,
            variance: VarianceKind::Dyadic,
        }
    }
}

impl Estimator for PpmlEstimator {
    fn estimate(&self, flows: &FlowMatrix) -> Result<EstimatorResult> {
        let fit = fit_ppml(flows, &self.log_costs, self.include_diagonal)?;
        let v = match self.variance {
            VarianceKind::Dyadic => fit.variance,
            kind => sandwich_variance(&fit, flows, &self.log_costs, kind)?.variance,
        };
        EstimatorResult::scalar(fit.epsilon_hat, v)
    }
}

/// An externally supplied estimate, sampled independently of the flows.
#[derive(Debug, Clone)]
pub struct FixedEstimator(pub EstimatorResult);

impl Estimator for FixedEstimator {
    fn estimate(&self, _flows: &FlowMatrix) -> Result<EstimatorResult> {
        Ok(self.0.clone())
    }

    fn data_dependent(&self) -> bool {
        false
    }
}

/// Data smoother applied to each drawn flow matrix before evaluating the
/// counterfactual.
#[derive(Debug, Clone, Default)]
pub enum Smoother {
    #[default]
    None,
    /// Exponentiated log-gravity fitted values off the diagonal; own flows
    /// are kept.
    LowDim(DistanceMatrix),
    /// Truncated SVD keeping the leading `rank` singular values; negative
    /// entries are clamped to zero.
    Svd(usize),
}

/// A smoothed matrix and the number of entries clamped at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub flows: FlowMatrix,
    pub clamped: usize,
}

pub fn truncated_svd(m: &DMatrix<f64>, rank: usize) -> Result<DMatrix<f64>> {
    let n = m.nrows().min(m.ncols());
    if rank > n {
        return Err(Error::RankTooLarge { rank, n });
    }
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for &k in order.iter().take(rank) {
        out += u.column(k) * vt.row(k) * svd.singular_values[k];
    }
    Ok(out)
}

impl Smoother {
    pub fn apply(&self, flows: &FlowMatrix) -> Result<Smoothed> {
        match self {
            Smoother::None => Ok(Smoothed {
                flows: flows.clone(),
                clamped: 0,
            }),
            Smoother::LowDim(distances) => {
                let fit = fit_log_gravity(flows, distances)?;
                let n = flows.n();
                let m = DMatrix::from_fn(n, n, |i, j| if i == j { flows.get(i, j) } else { fit.fitted[(i, j)].exp() });
                Ok(Smoothed {
                    flows: flows.with_values(m)?,
                    clamped: 0,
                })
            }
            Smoother::Svd(rank) => {
                let approx = truncated_svd(flows.values(), *rank)?;
                let clamped = approx.iter().filter(|v| **v < 0.0).count();
                Ok(Smoothed {
                    flows: flows.with_values(approx.map(|v| v.max(0.0)))?,
                    clamped,
                })
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Smoother::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IntervalKind {
    C1,
    /// Interval of intervals with `inner` parameter draws per flow draw.
    C2 { inner: usize },
    Robust { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub alpha: f64,
    pub kind: IntervalKind,
    pub draws_used: usize,
    pub draws_failed: usize,
    /// Failed draws were present; indices were taken on the full `B`.
    pub conservative: bool,
}

#[derive(Debug, Clone)]
pub struct UqConfig {
    pub b: usize,
    pub alpha: f64,
    pub seed: u64,
    pub mode: Provenance,
    pub interval: IntervalKind,
    pub smoother: Smoother,
    /// Re-estimate parameters on the smoothed draw rather than the raw one.
    pub reestimate_on_smoothed: bool,
    pub skip_failed: bool,
    pub max_failure_fraction: f64,
    pub workers: usize,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            b: 1000,
            alpha: 0.05,
            seed: 0,
            mode: Provenance::EeMe,
            interval: IntervalKind::C1,
            smoother: Smoother::None,
            reestimate_on_smoothed: false,
            skip_failed: true,
            max_failure_fraction: 0.05,
            workers: 1,
        }
    }
}

/// Order-statistic index for level `q`: exactly `q * total` on the integer
/// grid, otherwise rounded outward (down below the median, up above it).
fn grid_index(q: f64, total: usize) -> Result<usize> {
    let k = q * total as f64;
    let r = k.round();
    let idx = if (k - r).abs() <= 1e-9 * k.max(1.0) {
        r
    } else if q < 0.5 {
        k.floor()
    } else {
        k.ceil()
    };
    if idx < 1.0 {
        return Err(Error::BadQuantileGrid(k));
    }
    Ok((idx as usize).min(total))
}

impl UqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::InvalidInput("B must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput("alpha must lie in (0, 1)".into()));
        }
        grid_index(self.alpha / 2.0, self.b)?;
        if let IntervalKind::C2 { inner } = self.interval {
            if inner == 0 {
                return Err(Error::InvalidInput("C2 needs inner draws".into()));
            }
            grid_index(self.alpha / 2.0, inner)?;
        }
        if let IntervalKind::Robust { c } = self.interval {
            if !(c >= 1.0 && c.is_finite()) {
                return Err(Error::InvalidInput("robust c must be at least 1".into()));
            }
        }
        if !(0.0..1.0).contains(&self.max_failure_fraction) {
            return Err(Error::InvalidInput("max failure fraction must lie in [0, 1)".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidInput("need at least one worker".into()));
        }
        Ok(())
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Order statistics `k_lo` and `k_hi` (1-indexed, counted on `total`) of
/// `values`. Missing draws are assumed to fall in the opposite tail of each
/// endpoint, so both tails are trimmed by the same count as without
/// failures.
pub(crate) fn order_stats(values: &[f64], total: usize, k_lo: usize, k_hi: usize) -> Result<(f64, f64)> {
    let m = values.len();
    let from_top = total - k_hi;
    if m == 0 || k_lo > m || from_top >= m || m - from_top - 1 < k_lo - 1 {
        return Err(Error::TooManyFailures {
            failed: total - m,
            total,
            max_fraction: 1.0,
        });
    }
    let s = sorted(values);
    Ok((s[k_lo - 1], s[m - from_top - 1]))
}

/// C1 endpoints on draws that may be missing some of `total` draws.
pub fn interval_c1_partial(values: &[f64], total: usize, alpha: f64) -> Result<Interval> {
    let k_lo = grid_index(alpha / 2.0, total)?;
    let k_hi = grid_index(1.0 - alpha / 2.0, total)?;
    let (lo, hi) = order_stats(values, total, k_lo, k_hi)?;
    Ok(Interval {
        lo,
        hi,
        alpha,
        kind: IntervalKind::C1,
        draws_used: values.len(),
        draws_failed: total - values.len(),
        conservative: values.len() < total,
    })
}

/// The `(alpha/2 B)`-th and `((1 - alpha/2) B)`-th order statistics.
pub fn interval_c1(draws: &[f64], alpha: f64) -> Result<Interval> {
    interval_c1_partial(draws, draws.len(), alpha)
}

/// Lower endpoint from the lower bounds and upper endpoint from the upper
/// bounds, each at the matching order statistic.
pub fn interval_c2_partial(inner: &[(f64, f64)], total: usize, alpha: f64, inner_draws: usize) -> Result<Interval> {
    let k_lo = grid_index(alpha / 2.0, total)?;
    let k_hi = grid_index(1.0 - alpha / 2.0, total)?;
    let lows: Vec<f64> = inner.iter().map(|p| p.0).collect();
    let highs: Vec<f64> = inner.iter().map(|p| p.1).collect();
    let (lo, _) = order_stats(&lows, total, k_lo, k_hi)?;
    let (_, hi) = order_stats(&highs, total, k_lo, k_hi)?;
    Ok(Interval {
        lo,
        hi,
        alpha,
        kind: IntervalKind::C2 { inner: inner_draws },
        draws_used: inner.len(),
        draws_failed: total - inner.len(),
        conservative: inner.len() < total,
    })
}

pub fn interval_c2(inner: &[(f64, f64)], alpha: f64) -> Result<Interval> {
    interval_c2_partial(inner, inner.len(), alpha, 0)
}

/// Everything a bootstrap run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct UqRun {
    pub draws: DrawSet,
    /// One interval per outcome.
    pub intervals: Vec<Interval>,
    /// `g` at the observed flows and the point estimate.
    pub point_estimate: Vec<f64>,
    pub theta_hat: EstimatorResult,
    pub degenerate_zeros: usize,
    pub clamped_entries: usize,
}

struct DrawOk {
    gamma: Vec<f64>,
    theta: Vec<f64>,
    inner: Option<Vec<(f64, f64)>>,
    degenerate: usize,
    clamped: usize,
}

/// RNG stream for draw `b`; `which` separates flow and parameter draws.
pub fn draw_rng(seed: u64, b: usize, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * b as u64 + which);
    rng
}

/// Evaluates `f(0..count)` on `workers` threads, keeping index order.
pub fn map_indexed<T, F>(count: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(|| (0..count).into_par_iter().map(&f).collect());
        }
    }
    let _ = workers;
    (0..count).map(f).collect()
}

struct Problem<'a> {
    observed: &'a FlowMatrix,
    posterior: &'a dyn DataPosterior,
    estimator: &'a dyn Estimator,
    model: &'a dyn ModelFunction,
    spec: &'a CounterfactualSpec,
    cfg: &'a UqConfig,
    smoother: &'a Smoother,
    base: EstimatorResult,
}

impl Problem<'_> {
    fn one(&self, b: usize) -> Result<DrawOk> {
        let cfg = self.cfg;
        let (flows, degenerate) = if cfg.mode == Provenance::OnlyEe {
            (self.observed.clone(), 0)
        } else {
            let d = self.posterior.draw(self.observed, &mut draw_rng(cfg.seed, b, 0))?;
            (d.flows, d.degenerate)
        };
        let smoothed = self.smoother.apply(&flows)?;
        let est = match cfg.mode {
            Provenance::EeMe if self.estimator.data_dependent() => {
                let input = if cfg.reestimate_on_smoothed { &smoothed.flows } else { &flows };
                Some(self.estimator.estimate(input)?)
            }
            Provenance::OnlyMe => None,
            _ => Some(self.base.clone()),
        };
        let mut theta_rng = draw_rng(cfg.seed, b, 1);
        let mut next_theta = || match &est {
            Some(e) => sample_theta(e, &mut theta_rng),
            None => Ok(self.base.theta_hat.clone()),
        };
        let theta = next_theta()?;
        let gamma = evaluate_model(self.model, &smoothed.flows, &theta, self.spec)?;
        let inner = match cfg.interval {
            IntervalKind::C2 { inner } => {
                let mut per_outcome: Vec<Vec<f64>> = gamma.iter().map(|g| vec![*g]).collect();
                for _ in 1..inner {
                    let t = next_theta()?;
                    let g = evaluate_model(self.model, &smoothed.flows, &t, self.spec)?;
                    for (acc, v) in per_outcome.iter_mut().zip(g) {
                        acc.push(v);
                    }
                }
                let bounds = per_outcome
                    .iter()
                    .map(|v| interval_c1(v, cfg.alpha).map(|i| (i.lo, i.hi)))
                    .collect::<Result<Vec<_>>>()?;
                Some(bounds)
            }
            _ => None,
        };
        Ok(DrawOk {
            gamma,
            theta,
            inner,
            degenerate,
            clamped: smoothed.clamped,
        })
    }
}

fn run(
    observed: &FlowMatrix,
    posterior: &dyn DataPosterior,
    estimator: &dyn Estimator,
    model: &dyn ModelFunction,
    spec: &CounterfactualSpec,
    cfg: &UqConfig,
    smoother: &Smoother,
) -> Result<UqRun> {
    cfg.validate()?;
    let base = estimator.estimate(observed)?;
    base.validate()?;
    let point_estimate = evaluate_model(model, observed, &base.theta_hat, spec)?;
    let labels = model.outcome_labels(observed);
    let problem = Problem {
        observed,
        posterior,
        estimator,
        model,
        spec,
        cfg,
        smoother,
        base: base.clone(),
    };
    let results = map_indexed(cfg.b, cfg.workers, |b| problem.one(b));

    let q = point_estimate.len();
    let mut draws = vec![Vec::with_capacity(cfg.b); q];
    let mut inner: Vec<Vec<(f64, f64)>> = vec![Vec::new(); q];
    let mut theta = Vec::with_capacity(cfg.b);
    let mut draw_index = Vec::with_capacity(cfg.b);
    let mut failed = Vec::new();
    let (mut degenerate_zeros, mut clamped_entries) = (0, 0);
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(ok) => {
                for (acc, g) in draws.iter_mut().zip(&ok.gamma) {
                    acc.push(*g);
                }
                if let Some(bounds) = ok.inner {
                    for (acc, p) in inner.iter_mut().zip(bounds) {
                        acc.push(p);
                    }
                }
                theta.push(ok.theta);
                draw_index.push(b);
                degenerate_zeros += ok.degenerate;
                clamped_entries += ok.clamped;
            }
            Err(e) if !cfg.skip_failed => return Err(e),
            Err(e) => {
                log::debug!("draw {b} failed: {e}");
                failed.push(b);
            }
        }
    }
    if failed.len() as f64 > cfg.max_failure_fraction * cfg.b as f64 {
        return Err(Error::TooManyFailures {
            failed: failed.len(),
            total: cfg.b,
            max_fraction: cfg.max_failure_fraction,
        });
    }
    let intervals = (0..q)
        .map(|k| match cfg.interval {
            IntervalKind::C1 => interval_c1_partial(&draws[k], cfg.b, cfg.alpha),
            IntervalKind::C2 { inner: m } => interval_c2_partial(&inner[k], cfg.b, cfg.alpha, m),
            IntervalKind::Robust { c } => robust_interval_from(&draws[k], cfg.b, cfg.alpha, c),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UqRun {
        draws: DrawSet {
            outcome_labels: labels,
            draws,
            theta,
            draw_index,
            failed,
            b: cfg.b,
            seed: cfg.seed,
            provenance: cfg.mode,
        },
        intervals,
        point_estimate,
        theta_hat: base,
        degenerate_zeros,
        clamped_entries,
    })
}

/// General bootstrap: `D_b` from the flow posterior, `theta_b` from the
/// parameter posterior given `D_b`, `gamma_b = g(D_b, theta_b)`.
pub fn run_algorithm1(
    observed: &FlowMatrix,
    posterior: &dyn DataPosterior,
    estimator: &dyn Estimator,
    model: &dyn ModelFunction,
    spec: &CounterfactualSpec,
    cfg: &UqConfig,
) -> Result<UqRun> {
    run(observed, posterior, estimator, model, spec, cfg, &Smoother::None)
}

/// [`run_algorithm1`] with `g` evaluated on a smoothed draw. Parameters are drawn
/// given the raw draw unless `cfg.reestimate_on_smoothed` is set.
pub fn run_algorithm2(
    observed: &FlowMatrix,
    posterior: &dyn DataPosterior,
    estimator: &dyn Estimator,
    model: &dyn ModelFunction,
    spec: &CounterfactualSpec,
    cfg: &UqConfig,
) -> Result<UqRun> {
    run(observed, posterior, estimator, model, spec, cfg, &cfg.smoother)
}

/// [`run_algorithm1`] with the spike-and-slab flow posterior.
pub fn run_algorithm3(
    observed: &FlowMatrix,
    params: &CalibratedParams,
    estimator: &dyn Estimator,
    model: &dyn ModelFunction,
    spec: &CounterfactualSpec,
    cfg: &UqConfig,
) -> Result<UqRun> {
    run_algorithm1(observed, params, estimator, model, spec, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstantModel, IdentityModel};

    fn flows() -> FlowMatrix {
        FlowMatrix::from_rows(&[vec![4.0, 1.0, 2.0], vec![1.5, 5.0, 0.5], vec![1.0, 2.0, 6.0]]).unwrap()
    }

    #[test]
    fn c1_on_permutation() {
        let mut v: Vec<f64> = (1..=1000).map(f64::from).collect();
        v.reverse();
        v.swap(3, 700);
        let i = interval_c1(&v, 0.05).unwrap();
        assert_eq!((i.lo, i.hi), (25.0, 975.0));
        assert!(!i.conservative);
        assert_eq!(interval_c1(&[2.0; 40], 0.05).map(|i| (i.lo, i.hi)).unwrap(), (2.0, 2.0));
        let i = interval_c1(&v[..999], 0.05).unwrap();
        let mut s = v[..999].to_vec();
        s.sort_by(f64::total_cmp);
        // 24.975 rounds down to 24, 974.025 rounds up to 975.
        assert_eq!((i.lo, i.hi), (s[23], s[974]));
        assert!(matches!(interval_c1(&v[..999], 0.001), Err(Error::BadQuantileGrid(_))));
    }

    #[test]
    fn c2_shifted_inner() {
        let inner: Vec<(f64, f64)> = (1..=1000).map(|k| (k as f64, k as f64 + 10.0)).collect();
        let i = interval_c2(&inner, 0.05).unwrap();
        assert_eq!((i.lo, i.hi), (25.0, 985.0));
        let same = vec![(1.0, 2.0); 40];
        let i = interval_c2(&same, 0.05).unwrap();
        assert_eq!((i.lo, i.hi), (1.0, 2.0));
    }

    #[test]
    fn failures_trim_conservatively() {
        // 990 of 1000 draws: the 25th smallest and 26th largest, as with all 1000
        let v: Vec<f64> = (1..=990).map(f64::from).collect();
        let i = interval_c1_partial(&v, 1000, 0.05).unwrap();
        assert_eq!((i.lo, i.hi), (25.0, 965.0));
        assert!(i.conservative);
        assert_eq!(i.draws_failed, 10);
        assert!(interval_c1_partial(&v[..40], 1000, 0.05).is_err());
    }

    #[test]
    fn constant_model_gives_degenerate_interval() {
        let cfg = UqConfig { b: 40, ..Default::default() };
        let est = FixedEstimator(EstimatorResult::scalar(3.0, 0.5).unwrap());
        let run = run_algorithm1(&flows(), &ExactData, &est, &ConstantModel(vec![1.5]), &CounterfactualSpec::identity(3), &cfg).unwrap();
        assert_eq!((run.intervals[0].lo, run.intervals[0].hi), (1.5, 1.5));
        assert_eq!(run.draws.draws_used() + run.draws.draws_failed(), 40);
    }

    #[test]
    fn identity_model_draws_theta() {
        let est = FixedEstimator(EstimatorResult::scalar(3.0, 0.25).unwrap());
        let cfg = UqConfig { b: 2000, seed: 9, mode: Provenance::OnlyEe, ..Default::default() };
        let run = run_algorithm1(&flows(), &ExactData, &est, &IdentityModel, &CounterfactualSpec::identity(3), &cfg).unwrap();
        let i = &run.intervals[0];
        assert!((i.lo - (3.0 - 1.96 * 0.5)).abs() < 0.1, "{i:?}");
        assert!((i.hi - (3.0 + 1.96 * 0.5)).abs() < 0.1, "{i:?}");
        let cfg1 = UqConfig { mode: Provenance::OnlyMe, ..cfg };
        let run = run_algorithm1(&flows(), &ExactData, &est, &IdentityModel, &CounterfactualSpec::identity(3), &cfg1).unwrap();
        assert_eq!((run.intervals[0].lo, run.intervals[0].hi), (3.0, 3.0));
    }

    #[test]
    fn failures_are_counted_and_limited() {
        let est = |f: &FlowMatrix| EstimatorResult::scalar(f.get(0, 1), 0.0);
        struct Flaky;
        impl DataPosterior for Flaky {
            fn draw(&self, observed: &FlowMatrix, rng: &mut ChaCha8Rng) -> Result<DataDraw> {
                use rand::Rng;
                if rng.random::<f64>() < 0.03 {
                    return Err(Error::InvalidInput("flaky".into()));
                }
                Ok(DataDraw { flows: observed.clone(), degenerate: 0 })
            }
        }
        let cfg = UqConfig { b: 1000, ..Default::default() };
        let spec = CounterfactualSpec::identity(3);
        let run = run_algorithm1(&flows(), &Flaky, &est, &IdentityModel, &spec, &cfg).unwrap();
        assert!(run.draws.draws_failed() > 0);
        assert_eq!(run.draws.draws_used() + run.draws.draws_failed(), 1000);
        assert!(run.intervals[0].conservative);
        let strict = UqConfig { max_failure_fraction: 0.001, ..cfg.clone() };
        assert!(matches!(
            run_algorithm1(&flows(), &Flaky, &est, &IdentityModel, &spec, &strict),
            Err(Error::TooManyFailures { .. })
        ));
        let no_skip = UqConfig { skip_failed: false, ..cfg };
        assert!(matches!(
            run_algorithm1(&flows(), &Flaky, &est, &IdentityModel, &spec, &no_skip),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn svd_smoothing() {
        let u = [1.0, 2.0, 0.5, 3.0];
        let v = [2.0, 1.0, 4.0, 0.3];
        let m = DMatrix::from_fn(4, 4, |i, j| u[i] * v[j]);
        let s = truncated_svd(&m, 1).unwrap();
        assert!((s - &m).abs().max() < 1e-12);
        let m = DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 5) % 6) as f64 + 1.0);
        let sv = m.clone().svd(false, false).singular_values;
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let s2 = truncated_svd(&m, 2).unwrap();
        let defect = (&m - &s2).norm();
        let discarded = (sv[2] * sv[2] + sv[3] * sv[3]).sqrt();
        assert!((defect - discarded).abs() < 1e-10);
        let rank = s2.clone().svd(false, false).singular_values.iter().filter(|s| **s > 1e-9).count();
        assert!(rank <= 2);
        assert_eq!(truncated_svd(&m, 5).unwrap_err(), Error::RankTooLarge { rank: 5, n: 4 });
    }

    #[test]
    fn config_validation() {
        assert!(UqConfig::default().validate().is_ok());
        assert!(matches!(UqConfig { b: 30, ..Default::default() }.validate(), Err(Error::BadQuantileGrid(_))));
        assert!(UqConfig { interval: IntervalKind::C2 { inner: 30 }, ..Default::default() }.validate().is_err());
        assert!(UqConfig { interval: IntervalKind::Robust { c: 0.5 }, ..Default::default() }.validate().is_err());
    }
}
