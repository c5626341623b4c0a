//! `ltadmm`: run decentralized DP-ADMM experiments, query the privacy
//! accountant, calibrate noise, and inspect network spectra.
//!
//! Exit codes: 0 success, 2 configuration error, 3 step-size abort,
//! 4 divergence, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ltadmm_core::dp::{self, LogBase, MechanismParams};
use ltadmm_core::graph::beta_bound;
use ltadmm_core::harness::{self, Overrides};

#[derive(Parser)]
#[command(
    name = "ltadmm",
    version,
    about = "Decentralized learning with local-training ADMM and private gradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct AccountantArgs {
    /// Gradient clip threshold (zeta).
    #[arg(long)]
    zeta: f64,
    /// Minibatch size per inner step.
    #[arg(long = "batch-size")]
    batch_size: usize,
    /// Points in the local dataset.
    #[arg(long = "dataset-size")]
    dataset_size: usize,
    /// Communication rounds.
    #[arg(long)]
    rounds: usize,
    /// Local steps per round.
    #[arg(long)]
    tau: usize,
    /// DP failure probability.
    #[arg(long)]
    delta: f64,
    /// Logarithm for the RDP conversion: "e" (default) or a base like 10.
    #[arg(long = "log-base", value_parser = parse_log_base, default_value = "e")]
    log_base: LogBase,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a config file.
    Run {
        config: PathBuf,
        /// Replace the config's master seed (the dataset seed stays put).
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV destination.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// Run even if the dual step size fails its stability bound.
        #[arg(long)]
        force: bool,
        /// Replace the sampling-noise constant in the summary.
        #[arg(long = "sigma-g")]
        sigma_g: Option<f64>,
        /// Replace the config's RDP conversion log: "e" or a base like 10.
        #[arg(long = "log-base", value_parser = parse_log_base)]
        log_base: Option<LogBase>,
        /// Replace the config's worker thread count (results never change).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate the privacy budget of a mechanism configuration.
    Accountant {
        /// Noise standard deviation per coordinate.
        #[arg(long = "sigma-e")]
        sigma_e: f64,
        #[command(flatten)]
        common: AccountantArgs,
    },
    /// Solve for the noise level that meets a target budget.
    Calibrate {
        /// Target epsilon.
        #[arg(long)]
        epsilon: f64,
        #[command(flatten)]
        common: AccountantArgs,
    },
    /// Print the Laplacian spectrum and dual step-size limit of the
    /// config's network.
    Spectrum { config: PathBuf },
    /// Build everything and print the step-size report without running.
    Check {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_log_base(text: &str) -> Result<LogBase, String> {
    text.parse().map_err(|e| format!("{e}"))
}

fn print_budget(budget: &dp::PrivacyBudget<f64>, coefficient: f64) {
    println!("epsilon={}", budget.epsilon);
    println!("delta={}", budget.delta);
    println!("alpha={}", budget.optimal_alpha);
    println!("rdp_at_alpha={}", budget.rdp_at_optimal_alpha);
    println!("coefficient={coefficient}");
    println!("validity_margin={}", budget.validity_margin);
    println!("alpha_valid={}", budget.alpha_in_valid_regime());
}

fn cmd_run(
    config: PathBuf,
    seed: Option<u64>,
    out: PathBuf,
    force: bool,
    sigma_g: Option<f64>,
    log_base: Option<LogBase>,
    workers: Option<usize>,
) -> Result<(), harness::HarnessError> {
    let overrides = Overrides { seed, out: Some(out), force, workers, sigma_g, log_base };
    let outcome = harness::run_experiment(&config, &overrides)?;
    eprintln!("{}", outcome.stepsize);
    if let Some(path) = &outcome.csv_path {
        eprintln!("metrics written to {}", path.display());
    }
    print!("{}", outcome.summary);
    Ok(())
}

fn cmd_accountant(sigma_e: f64, a: &AccountantArgs) -> Result<(), dp::DpError> {
    let params = MechanismParams::new(a.zeta, sigma_e, a.batch_size, a.dataset_size)?;
    let budget = dp::compose_budget_with_log(&params, a.rounds, a.tau, a.delta, a.log_base)?;
    let coefficient = dp::composed_coefficient(&params, a.rounds, a.tau)?;
    print_budget(&budget, coefficient);
    Ok(())
}

fn cmd_calibrate(epsilon: f64, a: &AccountantArgs) -> Result<(), dp::DpError> {
    let sigma = dp::calibrate_noise_with_log(
        epsilon,
        a.delta,
        a.rounds,
        a.tau,
        a.zeta,
        a.batch_size,
        a.dataset_size,
        a.log_base,
    )?;
    println!("sigma={sigma}");
    let params = MechanismParams::new(a.zeta, sigma, a.batch_size, a.dataset_size)?;
    let budget = dp::compose_budget_with_log(&params, a.rounds, a.tau, a.delta, a.log_base)?;
    let coefficient = dp::composed_coefficient(&params, a.rounds, a.tau)?;
    print_budget(&budget, coefficient);
    Ok(())
}

fn cmd_spectrum(config: PathBuf) -> Result<(), harness::HarnessError> {
    let parsed = harness::load_config(&config)?;
    let topology = harness::build_topology(&parsed.graph)?;
    let spectrum = ltadmm_core::graph::spectral_info::<f64>(&topology)?;
    println!("n_agents={}", topology.n_agents());
    println!("edges={}", topology.edges().len());
    println!("max_degree={}", spectrum.max_degree);
    println!("lambda_min_nonzero={}", spectrum.lambda_min_nonzero);
    println!("lambda_max={}", spectrum.lambda_max);
    println!(
        "beta_limit={}",
        beta_bound(&spectrum, parsed.run.tau, parsed.run.rho)
    );
    Ok(())
}

fn cmd_check(config: PathBuf, seed: Option<u64>) -> Result<bool, harness::HarnessError> {
    let parsed = harness::load_config(&config)?;
    let overrides = Overrides { seed, ..Overrides::default() };
    let prepared = harness::prepare(&parsed, &overrides)?;
    println!("{}", prepared.stepsize);
    println!("smoothness={}", prepared.constants.smoothness);
    println!("sigma_g={}", prepared.sigma_g);
    Ok(prepared.stepsize.beta_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, seed, out, force, sigma_g, log_base, workers } => {
            match cmd_run(config, seed, out, force, sigma_g, log_base, workers) {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Command::Accountant { sigma_e, common } => match cmd_accountant(sigma_e, &common) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::Calibrate { epsilon, common } => match cmd_calibrate(epsilon, &common) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::Spectrum { config } => match cmd_spectrum(config) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Command::Check { config, seed } => match cmd_check(config, seed) {
            Ok(true) => 0,
            Ok(false) => 3,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    };
    ExitCode::from(code as u8)
}
