use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kpsr::Error;
use kpsr_cli::commands::{self, BUNDLE, CHECKPOINT, TRAJECTORIES};
use kpsr_cli::config::Experiment;

#[derive(Parser)]
#[command(name = "kpsr", version, about = "Kernel predictive state representations with safe policy optimization")]
struct Cli {
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behavior policy and write trajectories.
    Generate,
    /// Fit the operator bundle.
    Fit {
        /// Defaults to the trajectories in the output directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the constrained policy optimization.
    Train {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop at this iteration, leaving a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate the trained policy with the model and the oracle.
    Evaluate {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Convergence and value diagnostics against the oracle.
    Diagnose {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the full acceptance suite.
    RunAll,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Solve { .. } | Error::NonFinite(_) | Error::SingularInnovation(_) | Error::InvalidDistribution(_) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn set_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("KPSR_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("KPSR_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn or_out(path: Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    path.unwrap_or_else(|| out.join(name))
}

fn run(cli: Cli) -> Result<u8, Error> {
    set_threads()?;
    if let Command::RunAll = cli.command {
        let out = cli.out.unwrap_or_else(|| PathBuf::from("out"));
        let reports = commands::run_all(&out, cli.seed.unwrap_or(1))?;
        let failed = reports.iter().filter(|r| !r.pass).count();
        println!("{} of {} criteria passed", reports.len() - failed, reports.len());
        return Ok(u8::from(failed > 0));
    }
    let config = cli.config.ok_or_else(|| Error::Config("--config is required".into()))?;
    let exp = Experiment::load(&config, cli.seed, cli.out.as_deref())?;
    let out = exp.out.clone();
    match cli.command {
        Command::Generate => {
            let path = commands::cmd_generate(&exp)?;
            println!("wrote {}", path.display());
        }
        Command::Fit { data } => {
            let (path, report) = commands::cmd_fit(&exp, &or_out(data, &out, TRAJECTORIES))?;
            println!("wrote {} (ridge {:e}, {} windows)", path.display(), report.ridge, report.train_windows);
            for (name, loss) in &report.losses {
                println!("  {name:<16} {loss:.6}");
            }
        }
        Command::Train {
            bundle,
            data,
            resume,
            stop_after,
        } => {
            let state = commands::cmd_train(
                &exp,
                &or_out(bundle, &out, BUNDLE),
                &or_out(data, &out, TRAJECTORIES),
                resume,
                stop_after,
            )?;
            if let Some(row) = state.log.last() {
                println!("k={} J={:.4} V={:.4} C={:?} feasible={}", row.k, row.j, row.v, row.c, row.feasible);
            }
            if state.all_flagged() {
                eprintln!("every start history is infeasible under the model");
                return Ok(EXIT_INFEASIBLE);
            }
            let finished = state.k == exp.train_config()?.iterations;
            if finished && !state.feasible() {
                eprintln!("final iterate violates a constraint beyond tolerance");
                return Ok(EXIT_INFEASIBLE);
            }
        }
        Command::Evaluate { bundle, checkpoint, data } => {
            let report = commands::cmd_evaluate(
                &exp,
                &or_out(bundle, &out, BUNDLE),
                &or_out(checkpoint, &out, CHECKPOINT),
                &or_out(data, &out, TRAJECTORIES),
            )?;
            println!("model V={:.4} C={:?}", report.value, report.risks);
            if let (Some(v), Some(c)) = (report.exact_value, &report.exact_risks) {
                println!("exact V={v:.4} C={c:?}");
            }
        }
        Command::Diagnose { bundle, data } => {
            let report = commands::cmd_diagnose(&exp, &or_out(bundle, &out, BUNDLE), &or_out(data, &out, TRAJECTORIES))?;
            println!("slope={:.3} errors={:?}", report.slope, report.operator_errors);
            println!("max value gap={:.4} max risk gap={:.4}", report.max_value_gap, report.max_risk_gap);
        }
        Command::RunAll => unreachable!(),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
