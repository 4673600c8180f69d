use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kerrvapor_cli::commands::{self, Common, FitModel, Method, RetrieveInputs};
use kerrvapor_cli::validate::{self, ValidateOptions};
use kerrvapor_cli::{CliError, EXIT_NUMERIC, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "kerrvapor", version, about = "Transit-resolved Kerr simulations and interferometric retrieval for hot vapors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// Top-level random seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads [default: available parallelism].
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "kerrvapor-out")]
    out: PathBuf,
    /// Reduced run: Monte-Carlo trajectories capped, or only sub-minute criteria.
    #[arg(long, global = true)]
    quick: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo or analytic sweeps described by a TOML config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Phase retrieval from synthetic or recorded frames.
    Retrieve {
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Synthetic setup (TOML).
        #[arg(long)]
        synth: Option<PathBuf>,
        /// Frame file or directory (.png or .f64 with a .json sidecar).
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Signal intensity map in W/cm² (.f64 with sidecar), Fourier method.
        #[arg(long)]
        intensity: Option<PathBuf>,
        /// Peak intensity (W/cm²) used to scale the demodulated amplitude.
        #[arg(long)]
        peak_intensity: Option<f64>,
        /// Bucket trace CSV: time_s, intensity_wcm2, signal.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Ramp CSV for frame input: time_s, intensity_wcm2 per frame.
        #[arg(long)]
        ramp: Option<PathBuf>,
        /// Retrieval options (TOML with [fourier] and [bucket] sections).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Fits a model to CSV (x, y[, sigma]) or a JSON fit request.
    Fit {
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Runs the acceptance criteria and prints one PASS/FAIL line each.
    Validate {
        /// Comma-separated criterion numbers.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<u8>>,
        #[command(flatten)]
        shared: Shared,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fourier,
    Bucket,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Saturated,
    PowerLaw,
    ExpGrowth,
}

fn common(shared: &Shared) -> Common {
    Common {
        seed: shared.seed,
        workers: shared.workers.unwrap_or_else(commands::default_workers),
        out: shared.out.clone(),
        quick: shared.quick,
        command: std::env::args().collect(),
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate { config, shared } => {
            let m = commands::simulate(&config, &common(&shared))?;
            println!("wrote {} files to {}", m.outputs.len() + 1, shared.out.display());
        }
        Command::Retrieve {
            method,
            synth,
            frames,
            intensity,
            peak_intensity,
            trace,
            ramp,
            config,
            shared,
        } => {
            let method = match method {
                MethodArg::Fourier => Method::Fourier,
                MethodArg::Bucket => Method::Bucket,
            };
            let inputs = RetrieveInputs {
                synth,
                frames,
                intensity,
                peak_intensity_wcm2: peak_intensity,
                trace,
                ramp,
                options: config,
            };
            let m = commands::retrieve(method, &inputs, &common(&shared))?;
            println!("wrote {} files to {}", m.outputs.len() + 1, shared.out.display());
        }
        Command::Fit { model, input, shared } => {
            let model = model.map(|m| match m {
                ModelArg::Saturated => FitModel::Saturated,
                ModelArg::PowerLaw => FitModel::PowerLaw,
                ModelArg::ExpGrowth => FitModel::ExpGrowth,
            });
            commands::fit(model, &input, &common(&shared))?;
            let text = std::fs::read_to_string(shared.out.join("fit.json")).unwrap_or_default();
            print!("{text}");
        }
        Command::Validate { only, shared } => {
            let c = common(&shared);
            let opts = ValidateOptions {
                quick: shared.quick,
                only,
                seed: shared.seed.unwrap_or(1),
                workers: c.workers,
            };
            let reports = validate::run(&opts, |r| println!("{}", r.line()))?;
            std::fs::create_dir_all(&shared.out).map_err(|source| CliError::Output {
                path: shared.out.clone(),
                source,
            })?;
            validate::write_report(&shared.out.join("validate.json"), &reports)?;
            let failed = reports.iter().filter(|r| !r.passed()).count();
            println!("{} of {} criteria passed", reports.len() - failed, reports.len());
            if failed > 0 {
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
