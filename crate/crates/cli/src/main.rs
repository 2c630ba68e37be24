//! `envi` — GP state-space models trained by EnKF-aided variational
//! inference, with an exact Kalman-filter oracle and synthetic benchmarks.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use envi_core::Error;

#[derive(Parser)]
#[command(name = "envi", version, about = "EnKF-aided variational inference for GP state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. A config file is applied first; any
/// flag given on the command line overrides it.
#[derive(Args, Clone)]
struct Shared {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset: cartrack | kink | csv:PATH.
    #[arg(long)]
    dataset: Option<String>,
    /// Sequence length for the synthetic generators.
    #[arg(long = "T")]
    t_len: Option<usize>,
    /// Latent dimension.
    #[arg(long)]
    dx: Option<usize>,
    /// Inducing points.
    #[arg(long = "M")]
    num_inducing: Option<usize>,
    /// Ensemble size.
    #[arg(long = "N")]
    num_particles: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Process-noise variance of the kink generator.
    #[arg(long = "sigmaQ2")]
    sigma_q2: Option<f64>,
    /// Emission-noise variance of the kink generator (also pins R for kink).
    #[arg(long = "sigmaR2")]
    sigma_r2: Option<f64>,
    /// Observation-likelihood covariance: with-r | literal.
    #[arg(long)]
    eq27: Option<String>,
    /// Gram regularization in the transition: process | none.
    #[arg(long = "inducing-noise")]
    inducing_noise: Option<String>,
    /// Ensemble covariance regularizer.
    #[arg(long = "lambda-ens")]
    lambda_ens: Option<f64>,
    /// Online inner updates per step.
    #[arg(long = "k-inner")]
    k_inner: Option<usize>,
    /// Forecast horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Train/test split fraction for CSV datasets.
    #[arg(long)]
    split: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to load (filter/predict/eval).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and write it as CSV.
    Simulate(Shared),
    /// Offline training.
    Train(Shared),
    /// Online learning, one update per incoming observation.
    Online(Shared),
    /// Filtering with the exact KF oracle or a trained checkpoint.
    Filter {
        #[command(flatten)]
        shared: Shared,
        /// Use the exact Kalman filter with the true generative model.
        #[arg(long = "oracle-kf")]
        oracle_kf: bool,
    },
    /// Forward forecasting from a trained checkpoint.
    Predict(Shared),
    /// Metrics for a trained checkpoint on a dataset.
    Eval(Shared),
}

fn build_config(shared: &Shared, oracle_kf: bool) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &shared.config {
        cfg.apply_file(path)?;
    }
    if let Some(v) = &shared.dataset {
        cfg.set("dataset", v)?;
    }
    macro_rules! over {
        ($field:ident, $key:literal) => {
            if let Some(v) = &shared.$field {
                cfg.set($key, &v.to_string())?;
            }
        };
    }
    over!(t_len, "T");
    over!(dx, "dx");
    over!(num_inducing, "M");
    over!(num_particles, "N");
    over!(iters, "iters");
    over!(lr, "lr");
    over!(seed, "seed");
    over!(sigma_q2, "sigmaQ2");
    over!(sigma_r2, "sigmaR2");
    over!(eq27, "eq27");
    over!(inducing_noise, "inducing_noise");
    over!(lambda_ens, "lambda_ens");
    over!(k_inner, "k_inner");
    over!(horizon, "horizon");
    over!(split, "split");
    if let Some(v) = &shared.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &shared.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    cfg.oracle_kf = oracle_kf;
    if let Ok(threads) = std::env::var("ENVI_THREADS") {
        cfg.set("threads", &threads)?;
        if cfg.threads == 0 {
            return Err(Error::InvalidArgument("ENVI_THREADS must be >= 1".into()));
        }
    }
    cfg.resolve();
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Parse { .. } => 3,
        Error::NonFinite { .. } => 4,
        Error::InvalidArgument(msg) if msg.contains("unknown config key") => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    // Unknown flags and malformed command lines exit with clap's usage
    // error code (2).
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(s) => build_config(s, false).and_then(|c| commands::run_simulate(&c)),
        Command::Train(s) => build_config(s, false).and_then(|c| commands::run_train(&c)),
        Command::Online(s) => build_config(s, false).and_then(|c| commands::run_online(&c)),
        Command::Filter { shared, oracle_kf } => {
            build_config(shared, *oracle_kf).and_then(|c| commands::run_filter(&c))
        }
        Command::Predict(s) => build_config(s, false).and_then(|c| commands::run_predict(&c)),
        Command::Eval(s) => build_config(s, false).and_then(|c| commands::run_eval(&c)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
