use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sbi::runner::{
    cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, cmd_tune_prior, EvaluateOptions,
    ExperimentConfig, SweepConfig,
};

#[derive(Parser)]
#[command(name = "sbi", version, about = "Simulation-based inference at low budgets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test datasets for an experiment config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite existing artifacts.
        #[arg(long)]
        force: bool,
    },
    /// Tune the weight prior against the GP functional prior.
    TunePrior {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model (map, ensemble, or bnn) on the training set.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a trained model: nominal log prob, coverage curve, AUC.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
        /// Dump the normalized posterior grid for this test-set index.
        #[arg(long, value_name = "I")]
        posterior_grid: Option<usize>,
        /// Also write the predictive/aleatoric/epistemic decomposition.
        #[arg(long)]
        decompose: bool,
    },
    /// Run a budgets × methods × seeds grid; resumable.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (defaults to all cores).
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
    },
}

fn run(cli: Cli) -> sbi::error::Result<()> {
    match cli.command {
        Command::Generate { config, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (train, test) = cmd_generate(&cfg, force)?;
            println!("wrote {}", train.display());
            println!("wrote {}", test.display());
        }
        Command::TunePrior { config, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let artifact = cmd_tune_prior(&cfg, force)?;
            println!(
                "tuned prior: cross term {:.4} -> {:.4} over {} iters, prior coverage AUC {:.4}",
                artifact.report.initial_cross_term,
                artifact.report.final_cross_term,
                artifact.report.iters,
                artifact.prior_coverage_auc
            );
        }
        Command::Train { config, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            cmd_train(&cfg, force)?;
            println!("trained {}", cfg.tag());
        }
        Command::Evaluate {
            config,
            force,
            posterior_grid,
            decompose,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = EvaluateOptions {
                force,
                posterior_grid,
                decompose,
            };
            let row = cmd_evaluate(&cfg, &opts)?;
            println!(
                "{}: nominal log prob {:.4}, coverage AUC {:.4} ({:.1}s)",
                cfg.tag(),
                row.nominal_log_prob,
                row.coverage_auc,
                row.wall_time_seconds
            );
        }
        Command::Sweep { config, jobs } => {
            let cfg = SweepConfig::load(&config)?;
            let summary = cmd_sweep(&cfg, jobs)?;
            println!(
                "sweep: {} cells done ({} from cache), {} failed",
                summary.completed,
                summary.skipped,
                summary.failed.len()
            );
            for f in &summary.failed {
                eprintln!("failed: {f}");
            }
            println!("results: {}", summary.results_csv.display());
            println!("medians: {}", summary.medians_csv.display());
            if !summary.failed.is_empty() {
                return Err(sbi::error::SbiError::Divergence(format!(
                    "{} sweep cell(s) failed",
                    summary.failed.len()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
