mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Uncertainty quantification for counterfactuals built on mismeasured
/// dyadic flows.
#[derive(Debug, Parser)]
#[command(name = "flowuq", version, about)]
pub struct Cli {
    /// Flat `key = value` file supplying defaults for any long flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate the flow posterior from a mirror panel or one cross-section.
    Calibrate(CalibrateArgs),
    /// PPML estimate of the trade elasticity with its sampling variance.
    Estimate(EstimateArgs),
    /// Solve one counterfactual at a given elasticity.
    Counterfactual(CounterfactualArgs),
    /// Posterior draws and intervals for counterfactual outcomes.
    Uq(UqArgs),
    /// Normality and gravity diagnostics for calibrated parameters.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo attenuation bias of posterior-mean flows.
    SimulateAttenuation(AttenuationArgs),
    /// Pairwise rank-reversal frequencies across outcome draws.
    ReportRanks(RanksArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Mirror panel `origin,destination,year,flow_report1,flow_report2`.
    #[arg(long)]
    pub mirror: Option<PathBuf>,
    /// Flows `origin,destination,flow`; the cross-section to calibrate, or
    /// the source of own flows with a mirror panel.
    #[arg(long)]
    pub flows: Option<PathBuf>,
    #[arg(long)]
    pub distances: Option<PathBuf>,
    /// Period to calibrate; the last panel year by default.
    #[arg(long)]
    pub year: Option<i64>,
    /// Shrink dyad variances toward their fixed-effect fits.
    #[arg(long)]
    pub shrink: bool,
    /// Common measurement-error variance of log flows (cross-section only).
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Probability that a dyad's true flow is zero (cross-section only).
    #[arg(long)]
    pub p: Option<f64>,
    /// Probability that a positive flow is reported as zero (cross-section only).
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub flows: Option<PathBuf>,
    /// Trade costs `origin,destination,cost` in levels.
    #[arg(long)]
    pub costs: Option<PathBuf>,
    /// `dyadic` or `independent`.
    #[arg(long)]
    pub variance: Option<String>,
    #[arg(long)]
    pub include_diagonal: bool,
}

#[derive(Debug, Args)]
pub struct CounterfactualArgs {
    #[arg(long)]
    pub flows: Option<PathBuf>,
    /// Proportional cost changes `origin,destination,tau`.
    #[arg(long)]
    pub counterfactual: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct UqArgs {
    #[arg(long)]
    pub flows: Option<PathBuf>,
    /// Calibrated parameters from `calibrate`; not needed with `--mode only-ee`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Trade costs for PPML re-estimation on each draw.
    #[arg(long)]
    pub costs: Option<PathBuf>,
    /// Fixed elasticity, used when no costs are given.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Sampling variance of the fixed elasticity.
    #[arg(long)]
    pub epsilon_var: Option<f64>,
    #[arg(long)]
    pub counterfactual: Option<PathBuf>,
    /// `armington` or `constant`.
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated outcome values for the constant model.
    #[arg(long)]
    pub constant: Option<String>,
    /// Comma-separated location labels to report; all by default.
    #[arg(long)]
    pub outcomes: Option<String>,
    /// `only-ee`, `only-me` or `ee-me`.
    #[arg(long)]
    pub mode: Option<String>,
    /// `c1`, `c2` or `robust`.
    #[arg(long)]
    pub interval: Option<String>,
    /// Parameter draws per flow draw for `c2`.
    #[arg(long)]
    pub inner: Option<usize>,
    /// Bound on the likelihood ratio for `robust`.
    #[arg(long)]
    pub robust_c: Option<f64>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `none`, `lowdim` (needs distances) or `svd`.
    #[arg(long)]
    pub smoother: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub distances: Option<PathBuf>,
    #[arg(long)]
    pub reestimate_on_smoothed: bool,
    #[arg(long)]
    pub max_failure_fraction: Option<f64>,
    #[command(flatten)]
    pub workers: Workers,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub flows: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub distances: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttenuationArgs {
    /// Monte Carlo repetitions.
    #[arg(long)]
    pub m: Option<usize>,
    /// Posterior draws per repetition.
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub varsigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shrink toward zero instead of the fitted gravity prior.
    #[arg(long)]
    pub constant_prior: bool,
    #[arg(long)]
    pub bins: Option<usize>,
    #[command(flatten)]
    pub workers: Workers,
}

#[derive(Debug, Args)]
pub struct RanksArgs {
    /// Draw file written by `uq`.
    #[arg(long)]
    pub draws: Option<PathBuf>,
    /// Interval file from `uq`; its point estimates set the reference order.
    #[arg(long)]
    pub intervals: Option<PathBuf>,
    /// Comma-separated outcome labels; all columns by default.
    #[arg(long)]
    pub outcomes: Option<String>,
}

#[derive(Debug, Args)]
pub struct Workers {
    /// Worker threads; results do not depend on it. Defaults to
    /// `FLOWUQ_WORKERS`, then 1.
    #[arg(long)]
    pub workers: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
