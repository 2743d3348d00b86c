use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qcface_cli::config::{seed_override, EmitKind, ExperimentConfig};
use qcface_cli::io::fmt_real;
use qcface_cli::ops::{run_analyze, run_check_grad, run_plan, run_sweep};
use qcface_cli::CliError;

use qcface_core::reg::{expected_magnitude, solve_k, BMode, RegParams};

#[derive(Parser)]
#[command(
    name = "qcface",
    version,
    about = "Magnitude-planning lab: calibration, gradient checks, synthetic runs, exports"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Calibrate the regularizer weight for an anchor pair and print the
    /// guidance-to-target curve.
    SolveK {
        /// Lower magnitude anchor.
        #[arg(long)]
        la: f64,
        /// Upper magnitude anchor.
        #[arg(long)]
        ua: f64,
    },
    /// Compare analytic gradients against central differences across the
    /// loss family.
    CheckGrad {
        #[arg(long)]
        config: PathBuf,
        /// Random instances per case.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Deliberate analytic-side perturbation; any nonzero value must
        /// make the check fail.
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb_analytic: f64,
    },
    /// Generate the dataset, run the schedule, write the run directory.
    Plan {
        #[arg(long)]
        config: PathBuf,
    },
    /// Regenerate exports from a stored run.
    Analyze {
        /// Run directory containing state.json.
        #[arg(long)]
        run: PathBuf,
        /// Comma list of history,magnitudes,projection,metrics; defaults
        /// to the stored config's emit list.
        #[arg(long)]
        emit: Option<String>,
    },
    /// One planner run per value of a single config field.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted path into the config, e.g. loss.s or train.lr.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::SolveK { la, ua } => cmd_solve_k(la, ua),
        Cmd::CheckGrad {
            config,
            instances,
            perturb_analytic,
        } => cmd_check_grad(&config, instances, perturb_analytic),
        Cmd::Plan { config } => cmd_plan(&config),
        Cmd::Analyze { run, emit } => cmd_analyze(&run, emit.as_deref()),
        Cmd::Sweep {
            config,
            param,
            values,
        } => cmd_sweep(&config, &param, &values),
    }
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, Option<u64>), CliError> {
    let cfg = ExperimentConfig::load(path)?;
    let seed = seed_override()?;
    Ok((cfg, seed))
}

fn cmd_solve_k(la: f64, ua: f64) -> Result<(), CliError> {
    let k = solve_k(la, ua)?;
    println!("k,{}", fmt_real(k));
    let params = RegParams::new(la, ua, BMode::Zero, 0.0)?;
    println!("p,z_star");
    for p in [0.0, 0.25, 0.5, 0.75, 1.0] {
        println!("{p},{}", fmt_real(expected_magnitude(&params, p)?));
    }
    Ok(())
}

fn cmd_check_grad(path: &Path, instances: usize, perturb: f64) -> Result<(), CliError> {
    let (cfg, seed_env) = load_config(path)?;
    let resolved = cfg.resolve()?;
    let seed = seed_env.unwrap_or(resolved.train.seed);
    let (report, pass) = run_check_grad(seed, instances, perturb)?;
    print!("{report}");
    if pass {
        Ok(())
    } else {
        Err(CliError::Check(
            "gradient check failed: some case exceeded tolerance".into(),
        ))
    }
}

fn cmd_plan(path: &Path) -> Result<(), CliError> {
    let (cfg, seed) = load_config(path)?;
    let outcome = run_plan(&cfg, seed)?;
    if let Some(message) = outcome.failure {
        return Err(CliError::Numeric {
            message,
            state_path: Some(outcome.state_path),
        });
    }
    println!("run written to {}", outcome.dir.display());
    Ok(())
}

fn cmd_analyze(run: &Path, emit: Option<&str>) -> Result<(), CliError> {
    let kinds = emit.map(EmitKind::parse_list).transpose()?;
    let written = run_analyze(run, kinds)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_sweep(path: &Path, param: &str, values: &str) -> Result<(), CliError> {
    let (cfg, seed) = load_config(path)?;
    let summary = run_sweep(&cfg, param, values, seed)?;
    println!("sweep summary at {}", summary.display());
    Ok(())
}
