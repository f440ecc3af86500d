use std::path::{Path, PathBuf};

use flowuq::armington::{solve_counterfactual, welfare_change_pct, ArmingtonModel, SolverOptions};
use flowuq::attenuation::{run_attenuation_sim, AttenuationSimConfig};
use flowuq::diagnostics::{gravity_partial_plot, histogram, normality_diagnostic, summarize};
use flowuq::eb::{calibrate_baseline, calibrate_mirror, ingest_mirror_csv, CalibratedParams};
use flowuq::gravity::{fit_ppml, sandwich_variance, VarianceKind};
use flowuq::io::{dyadic_csv, read_counterfactual, read_distances, read_flows, read_log_costs};
use flowuq::model::{ConstantModel, CounterfactualSpec, EstimatorResult, FlowMatrix, ModelFunction, Provenance};
use flowuq::ranks::rank_reversals;
use flowuq::uq::{
    run_algorithm1, DataPosterior, Estimator, ExactData, FixedEstimator, IntervalKind, PpmlEstimator, Smoother, UqConfig,
};
use flowuq::Error as CoreError;
use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::FileConfig;
use crate::error::{CliError, CliResult};
use crate::{
    AttenuationArgs, CalibrateArgs, Cli, Command, CounterfactualArgs, DiagnoseArgs, EstimateArgs, RanksArgs, UqArgs,
    Workers,
};

pub const WORKERS_ENV: &str = "FLOWUQ_WORKERS";

pub fn run(cli: Cli) -> CliResult<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let out = file.path(cli.out, "out").unwrap_or_else(|| PathBuf::from("flowuq-out"));
    let out = Output::new(out)?;
    match cli.command {
        Command::Calibrate(a) => calibrate(&file, &out, a),
        Command::Estimate(a) => estimate(&file, &out, a),
        Command::Counterfactual(a) => counterfactual(&file, &out, a),
        Command::Uq(a) => uq(&file, &out, a),
        Command::Diagnose(a) => diagnose(&file, &out, a),
        Command::SimulateAttenuation(a) => simulate_attenuation(&file, &out, a),
        Command::ReportRanks(a) => report_ranks(&file, &out, a),
    }
}

struct Output(PathBuf);

impl Output {
    fn new(dir: PathBuf) -> CliResult<Self> {
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.display().to_string(), source })?;
        Ok(Self(dir))
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.0.join(name);
        std::fs::write(&path, contents).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        self.write(name, &text)
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn workers(file: &FileConfig, w: Workers) -> CliResult<usize> {
    let env = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|e| CliError::Config(format!("{WORKERS_ENV}={v:?}: {e}")))?,
        Err(_) => 1,
    };
    Ok(file.or(w.workers, "workers", env)?.max(1))
}

fn histogram_csv(bins: &[flowuq::diagnostics::HistogramBin]) -> String {
    let mut s = String::from("lower,upper,count\n");
    for b in bins {
        s.push_str(&format!("{:?},{:?},{}\n", b.lower, b.upper, b.count));
    }
    s
}

/// Label-aligned diagonal of `flows` for the locations in `labels`.
fn own_flows(flows: &FlowMatrix, labels: &[String]) -> CliResult<Vec<f64>> {
    labels
        .iter()
        .map(|l| {
            let k = flows
                .labels()
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| CoreError::InvalidInput(format!("no own flow for {l}")))?;
            Ok(flows.get(k, k))
        })
        .collect()
}

fn constant_matrix(n: usize, v: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { v })
}

#[derive(Serialize)]
struct DiagnosticsReport {
    gravity: Option<flowuq::gravity::GravitySummary>,
    partial_slope: f64,
    normality: Option<flowuq::diagnostics::ResidualSummary>,
}

fn write_diagnostics(
    out: &Output,
    flows: &FlowMatrix,
    distances: &flowuq::model::DistanceMatrix,
    params: &CalibratedParams,
    bins: usize,
) -> CliResult<DiagnosticsReport> {
    let norm = normality_diagnostic(flows, params, bins)?;
    let plot = gravity_partial_plot(flows, distances, bins)?;
    out.write("normality_histogram.csv", &histogram_csv(&norm.histogram))?;
    let mut pts = String::from("log_distance_partialled,log_flow_partialled\n");
    for (x, y) in &plot.points {
        pts.push_str(&format!("{x:?},{y:?}\n"));
    }
    out.write("gravity_plot.csv", &pts)?;
    let mut binned = String::from("center,mean,count\n");
    for b in &plot.bins {
        binned.push_str(&format!("{:?},{:?},{}\n", b.center, b.mean, b.count));
    }
    out.write("gravity_bins.csv", &binned)?;
    if norm.summary.as_ref().is_some_and(|s| s.heavy_tails) {
        warn!("standardized log-flow residuals are heavy tailed; the normal prior may be misspecified");
    }
    Ok(DiagnosticsReport { gravity: params.gravity.clone(), partial_slope: plot.slope, normality: norm.summary })
}

#[derive(Serialize)]
struct CalibrationReport {
    regime: &'static str,
    period: Option<i64>,
    na_dyads_copied: Option<usize>,
    na_entries_zeroed: Option<usize>,
    #[serde(flatten)]
    diagnostics: DiagnosticsReport,
}

fn calibrate(file: &FileConfig, out: &Output, a: CalibrateArgs) -> CliResult<()> {
    let bins = file.or(a.bins, "bins", 30)?;
    let mirror = file.optional_path(a.mirror, "mirror")?;
    let flows_path = file.optional_path(a.flows, "flows")?;
    let dist_path = file.required_path(a.distances, "distances")?;
    let shrink = file.flag(a.shrink, "shrink")?;
    match mirror {
        Some(path) => {
            let (panel, na) = ingest_mirror_csv(&path)?;
            info!(
                "missing values: {} all-missing dyad reports copied from the other side, {} entries set to zero",
                na.dyads_copied, na.entries_zeroed
            );
            let distances = read_distances(&dist_path, &panel.labels)?;
            let cal = calibrate_mirror(&panel, &distances, shrink)?;
            let year = match file.get(a.year, "year")? {
                Some(y) => y,
                None => *panel.years.last().expect("panel has a period"),
            };
            let params = cal.params_for_period(year)?;
            let own = match &flows_path {
                Some(p) => Some(own_flows(&read_flows(p)?, &panel.labels)?),
                None => {
                    warn!("no --flows given; own flows in flows.csv are zero");
                    None
                }
            };
            let observed = panel.observed_flows(year, own.as_deref())?;
            out.write("flows.csv", &dyadic_csv(observed.labels(), observed.values(), "flow", |_, _, v| v != 0.0))?;
            out.write("params.json", &params.to_json())?;
            let diagnostics = write_diagnostics(out, &observed, &distances, &params, bins)?;
            out.json(
                "calibration.json",
                &CalibrationReport {
                    regime: "mirror",
                    period: Some(year),
                    na_dyads_copied: Some(na.dyads_copied),
                    na_entries_zeroed: Some(na.entries_zeroed),
                    diagnostics,
                },
            )
        }
        None => {
            let flows_path = flows_path.ok_or_else(|| CliError::Config("--mirror or --flows is required".into()))?;
            let sigma2 = file
                .get(a.sigma2, "sigma2")?
                .ok_or_else(|| CliError::Config("--sigma2 is required without a mirror panel".into()))?;
            let flows = read_flows(&flows_path)?;
            let distances = read_distances(&dist_path, flows.labels())?;
            let n = flows.n();
            let p = file.get(a.p, "p")?.map(|v| constant_matrix(n, v));
            let b = file.get(a.b, "b")?.map(|v| constant_matrix(n, v));
            let params = calibrate_baseline(&flows, &distances, sigma2, p.as_ref(), b.as_ref())?;
            out.write("params.json", &params.to_json())?;
            let diagnostics = write_diagnostics(out, &flows, &distances, &params, bins)?;
            out.json(
                "calibration.json",
                &CalibrationReport {
                    regime: "baseline",
                    period: None,
                    na_dyads_copied: None,
                    na_entries_zeroed: None,
                    diagnostics,
                },
            )
        }
    }
}

#[derive(Serialize)]
struct EstimateReport {
    epsilon_hat: f64,
    variance: f64,
    std_error: f64,
    variance_kind: VarianceKind,
    projected: bool,
    iterations: usize,
    deviance: f64,
}

fn estimate(file: &FileConfig, out: &Output, a: EstimateArgs) -> CliResult<()> {
    let flows = read_flows(&file.required_path(a.flows, "flows")?)?;
    let costs = read_log_costs(&file.required_path(a.costs, "costs")?, flows.labels())?;
    let kind = match file.or(a.variance, "variance", "dyadic".to_string())?.as_str() {
        "dyadic" => VarianceKind::Dyadic,
        "independent" => VarianceKind::Independent,
        other => return Err(CliError::Config(format!("unknown variance {other:?}"))),
    };
    let fit = fit_ppml(&flows, &costs, file.flag(a.include_diagonal, "include-diagonal")?)?;
    let v = sandwich_variance(&fit, &flows, &costs, kind)?;
    info!("epsilon = {:.4} (se {:.4})", fit.epsilon_hat, v.variance.sqrt());
    out.json(
        "estimate.json",
        &EstimateReport {
            epsilon_hat: fit.epsilon_hat,
            variance: v.variance,
            std_error: v.variance.sqrt(),
            variance_kind: kind,
            projected: v.projected,
            iterations: fit.iterations,
            deviance: fit.deviance,
        },
    )
}

fn counterfactual(file: &FileConfig, out: &Output, a: CounterfactualArgs) -> CliResult<()> {
    let flows = read_flows(&file.required_path(a.flows, "flows")?)?;
    let spec = read_counterfactual(&file.required_path(a.counterfactual, "counterfactual")?, flows.labels())?;
    let epsilon = file.get(a.epsilon, "epsilon")?.ok_or_else(|| CliError::Config("--epsilon is required".into()))?;
    let eq = solve_counterfactual(&flows, &spec, epsilon, &SolverOptions::default())?;
    let pct = welfare_change_pct(&eq);
    let mut csv = String::from("location,welfare_prop,welfare_change_pct,income_prop\n");
    for (k, l) in flows.labels().iter().enumerate() {
        csv.push_str(&format!("{l},{:?},{:?},{:?}\n", eq.welfare_prop[k], pct[k], eq.y_prop[k]));
    }
    info!("solved in {} iterations (defect {:e})", eq.iterations, eq.residual);
    out.write("welfare.csv", &csv)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| CliError::Config(format!("bad {what} entry {x:?}"))))
        .collect()
}

fn label_indices(labels: &[String], list: &str) -> CliResult<Vec<usize>> {
    list.split(',')
        .map(|l| {
            let l = l.trim();
            labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| CliError::Config(format!("unknown outcome {l:?}")))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct OutcomeInterval {
    label: String,
    point_estimate: f64,
    lo: f64,
    hi: f64,
}

#[derive(Serialize, Deserialize)]
struct UqReport {
    model: String,
    mode: Provenance,
    interval: IntervalKind,
    b: usize,
    alpha: f64,
    seed: u64,
    theta_hat: Vec<f64>,
    draws_used: usize,
    draws_failed: usize,
    conservative: bool,
    degenerate_zeros: usize,
    clamped_entries: usize,
    outcomes: Vec<OutcomeInterval>,
}

fn uq(file: &FileConfig, out: &Output, a: UqArgs) -> CliResult<()> {
    let flows = read_flows(&file.required_path(a.flows, "flows")?)?;
    let labels = flows.labels().to_vec();
    let n = flows.n();
    let mode: Provenance = file.or(a.mode, "mode", "ee-me".to_string())?.parse()?;
    let interval = match file.or(a.interval, "interval", "c1".to_string())?.as_str() {
        "c1" => IntervalKind::C1,
        "c2" => IntervalKind::C2 { inner: file.or(a.inner, "inner", 40)? },
        "robust" => IntervalKind::Robust { c: file.or(a.robust_c, "robust-c", 1.5)? },
        other => return Err(CliError::Config(format!("unknown interval {other:?}"))),
    };
    let distances = file.optional_path(a.distances, "distances")?;
    let smoother = match file.or(a.smoother, "smoother", "none".to_string())?.as_str() {
        "none" => Smoother::None,
        "lowdim" => {
            let d = distances.ok_or_else(|| CliError::Config("--smoother lowdim needs --distances".into()))?;
            Smoother::LowDim(read_distances(&d, &labels)?)
        }
        "svd" => Smoother::Svd(file.or(a.rank, "rank", 1)?),
        other => return Err(CliError::Config(format!("unknown smoother {other:?}"))),
    };
    let cfg = UqConfig {
        b: file.or(a.b, "b", 1000)?,
        alpha: file.or(a.alpha, "alpha", 0.05)?,
        seed: file.or(a.seed, "seed", 0)?,
        mode,
        interval,
        smoother,
        reestimate_on_smoothed: file.flag(a.reestimate_on_smoothed, "reestimate-on-smoothed")?,
        skip_failed: true,
        max_failure_fraction: file.or(a.max_failure_fraction, "max-failure-fraction", 0.05)?,
        workers: workers(file, a.workers)?,
    };
    cfg.validate()?;

    let posterior: Box<dyn DataPosterior> = match file.optional_path(a.params, "params")? {
        Some(p) => {
            let params = CalibratedParams::from_json(&read_text(&p)?)?;
            if params.labels != labels {
                return Err(CoreError::ShapeMismatch("parameter labels differ from the flow labels".into()).into());
            }
            Box::new(params)
        }
        None if mode == Provenance::OnlyEe => Box::new(ExactData),
        None => return Err(CliError::Config("--params is required unless --mode only-ee".into())),
    };
    let estimator: Box<dyn Estimator> = match file.optional_path(a.costs, "costs")? {
        Some(p) => Box::new(PpmlEstimator::new(read_log_costs(&p, &labels)?)),
        None => {
            let eps = file
                .get(a.epsilon, "epsilon")?
                .ok_or_else(|| CliError::Config("--costs or --epsilon is required".into()))?;
            let var = file.or(a.epsilon_var, "epsilon-var", 0.0)?;
            Box::new(FixedEstimator(EstimatorResult::scalar(eps, var)?))
        }
    };
    let model_name = file.or(a.model, "model", "armington".to_string())?;
    let outcome_list = file.get(a.outcomes, "outcomes")?;
    let model: Box<dyn ModelFunction> = match model_name.as_str() {
        "armington" => {
            let m = ArmingtonModel::default();
            Box::new(match &outcome_list {
                Some(list) => m.with_outcomes(label_indices(&labels, list)?),
                None => m,
            })
        }
        "constant" => {
            let values = file
                .get(a.constant, "constant")?
                .ok_or_else(|| CliError::Config("--model constant needs --constant".into()))?;
            Box::new(ConstantModel(parse_list(&values, "constant")?))
        }
        other => return Err(CliError::Config(format!("unknown model {other:?}"))),
    };
    let spec = match file.optional_path(a.counterfactual, "counterfactual")? {
        Some(p) => read_counterfactual(&p, &labels)?,
        None if model_name == "armington" => {
            return Err(CliError::Config("--counterfactual is required for the armington model".into()))
        }
        None => CounterfactualSpec::identity(n),
    };

    info!("{} draws on {} workers", cfg.b, cfg.workers);
    let run = run_algorithm1(&flows, posterior.as_ref(), estimator.as_ref(), model.as_ref(), &spec, &cfg)?;
    if run.degenerate_zeros > 0 {
        info!("{} slab draws had no prior mean and were set to zero", run.degenerate_zeros);
    }
    if run.draws.draws_failed() > 0 {
        warn!("{} of {} draws failed and were skipped", run.draws.draws_failed(), cfg.b);
    }
    out.write("draws.csv", &run.draws.to_csv())?;
    let outcomes = run
        .draws
        .outcome_labels
        .iter()
        .zip(&run.point_estimate)
        .zip(&run.intervals)
        .map(|((label, pe), i)| OutcomeInterval { label: label.clone(), point_estimate: *pe, lo: i.lo, hi: i.hi })
        .collect();
    let first = run.intervals.first();
    out.json(
        "intervals.json",
        &UqReport {
            model: model.name().to_string(),
            mode,
            interval,
            b: cfg.b,
            alpha: cfg.alpha,
            seed: cfg.seed,
            theta_hat: run.theta_hat.theta_hat.clone(),
            draws_used: run.draws.draws_used(),
            draws_failed: run.draws.draws_failed(),
            conservative: first.is_some_and(|i| i.conservative),
            degenerate_zeros: run.degenerate_zeros,
            clamped_entries: run.clamped_entries,
            outcomes,
        },
    )
}

fn diagnose(file: &FileConfig, out: &Output, a: DiagnoseArgs) -> CliResult<()> {
    let flows = read_flows(&file.required_path(a.flows, "flows")?)?;
    let params = CalibratedParams::from_json(&read_text(&file.required_path(a.params, "params")?)?)?;
    if params.labels != flows.labels() {
        return Err(CoreError::ShapeMismatch("parameter labels differ from the flow labels".into()).into());
    }
    let distances = read_distances(&file.required_path(a.distances, "distances")?, flows.labels())?;
    let report = write_diagnostics(out, &flows, &distances, &params, file.or(a.bins, "bins", 30)?)?;
    out.json("diagnostics.json", &report)
}

#[derive(Serialize)]
struct AttenuationReport {
    m: usize,
    b: usize,
    n: usize,
    rho: f64,
    epsilon: f64,
    s: f64,
    varsigma: f64,
    seed: u64,
    constant_prior: bool,
    mean_bias: f64,
    sd_bias: f64,
}

fn simulate_attenuation(file: &FileConfig, out: &Output, a: AttenuationArgs) -> CliResult<()> {
    let d = AttenuationSimConfig::default();
    let cfg = AttenuationSimConfig {
        m: file.or(a.m, "m", 2000)?,
        b: file.or(a.b, "b", 200)?,
        n: file.or(a.n, "n", d.n)?,
        rho: file.or(a.rho, "rho", d.rho)?,
        epsilon: file.or(a.epsilon, "epsilon", d.epsilon)?,
        s: file.or(a.s, "s", d.s)?,
        varsigma: file.or(a.varsigma, "varsigma", d.varsigma)?,
        seed: file.or(a.seed, "seed", 0)?,
        constant_prior: file.flag(a.constant_prior, "constant-prior")?,
        workers: workers(file, a.workers)?,
    };
    if cfg.rho < 0.0 {
        warn!("rho = {} is negative: costs fall with distance", cfg.rho);
    }
    let bias = run_attenuation_sim(&cfg)?;
    let mut csv = String::from("rep,median_bias\n");
    for (k, v) in bias.iter().enumerate() {
        csv.push_str(&format!("{k},{v:?}\n"));
    }
    out.write("biases.csv", &csv)?;
    out.write("bias_histogram.csv", &histogram_csv(&histogram(&bias, file.or(a.bins, "bins", 30)?)))?;
    let s = summarize(&bias);
    let mean = bias.iter().sum::<f64>() / bias.len() as f64;
    info!("mean median bias {mean:.4} over {} repetitions", bias.len());
    out.json(
        "attenuation.json",
        &AttenuationReport {
            m: cfg.m,
            b: cfg.b,
            n: cfg.n,
            rho: cfg.rho,
            epsilon: cfg.epsilon,
            s: cfg.s,
            varsigma: cfg.varsigma,
            seed: cfg.seed,
            constant_prior: cfg.constant_prior,
            mean_bias: mean,
            sd_bias: s.map_or(0.0, |s| s.variance.sqrt()),
        },
    )
}

/// Columns of a `draw,<label>...` file.
fn parse_draws(text: &str) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CoreError::Parse { row: 1, message: "empty draw file".into() })?;
    let labels: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut cols = vec![Vec::new(); labels.len()];
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != labels.len() + 1 {
            return Err(CoreError::LengthMismatch(format!(
                "row {} has {} fields, expected {}",
                k + 2,
                fields.len(),
                labels.len() + 1
            ))
            .into());
        }
        for (c, f) in fields[1..].iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| CoreError::Parse { row: k + 2, message: format!("not a number: {f:?}") })?;
            cols[c].push(v);
        }
    }
    Ok((labels, cols))
}

fn report_ranks(file: &FileConfig, out: &Output, a: RanksArgs) -> CliResult<()> {
    let (mut labels, mut cols) = parse_draws(&read_text(&file.required_path(a.draws, "draws")?)?)?;
    let mut reference = match file.optional_path(a.intervals, "intervals")? {
        Some(p) => {
            let rep: UqReport = serde_json::from_str(&read_text(&p)?)
                .map_err(|e| CoreError::Parse { row: e.line(), message: e.to_string() })?;
            let pe: Vec<f64> = rep.outcomes.iter().map(|o| o.point_estimate).collect();
            if rep.outcomes.iter().map(|o| &o.label).ne(labels.iter()) {
                return Err(CoreError::LengthMismatch("interval outcomes differ from draw columns".into()).into());
            }
            Some(pe)
        }
        None => None,
    };
    if let Some(list) = file.get(a.outcomes, "outcomes")? {
        let idx = label_indices(&labels, &list)?;
        labels = idx.iter().map(|&k| labels[k].clone()).collect();
        cols = idx.iter().map(|&k| cols[k].clone()).collect();
        reference = reference.map(|r| idx.iter().map(|&k| r[k]).collect());
    }
    let pairs = rank_reversals(&labels, &cols, reference.as_deref())?;
    let mut csv = String::from("first,second,reversal,first_below,first_above,ties\n");
    for p in &pairs {
        let rev = p.reversal.map_or(String::new(), |r| format!("{r:?}"));
        csv.push_str(&format!("{},{},{rev},{:?},{:?},{:?}\n", p.first, p.second, p.first_below, p.first_above, p.ties));
    }
    out.write("rank_reversals.csv", &csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draw_files_parse_by_column() {
        let (l, c) = parse_draws("draw,A,B\n0,1.5,2.0\n2,0.5,-1.0\n").unwrap();
        assert_eq!(l, vec!["A", "B"]);
        assert_eq!(c, vec![vec![1.5, 0.5], vec![2.0, -1.0]]);
        assert!(matches!(parse_draws("draw,A\n0,1,2\n"), Err(CliError::Core(CoreError::LengthMismatch(_)))));
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(CliError::from(CoreError::Parse { row: 2, message: String::new() }).exit_code(), 2);
        assert_eq!(CliError::from(CoreError::Collinear).exit_code(), 3);
        let e = CoreError::TooManyFailures { failed: 9, total: 10, max_fraction: 0.05 };
        assert_eq!(CliError::from(e).exit_code(), 4);
    }
}
