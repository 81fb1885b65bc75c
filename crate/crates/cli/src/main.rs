use std::path::PathBuf;
use std::process::ExitCode;

use cgrid_cli::{
    exit_code, gen_data, rollout_command, train_command, verify_symmetry, ExperimentConfig, RolloutOptions, EXIT_OK,
    EXIT_VIOLATION,
};
use cgrid_core::dataset::Task;
use cgrid_core::train::TrainMode;
use cgrid_core::verify::Target;
use cgrid_core::Result;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "cgrid",
    version,
    about = "Symmetry- and conservation-constrained surrogates on staggered grids"
)]
struct Cli {
    /// Experiment config (JSON). Without one, desk defaults for --task are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Task for the built-in defaults when no config is given.
    #[arg(long, global = true, value_enum, default_value = "swe")]
    task: TaskArg,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Swe,
    Ins,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    SweSolver,
    InsSolver,
    InputLayer,
    FullNet,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    Pushforward,
    Augmented,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate trajectories and write them with a manifest.
    GenData {
        /// Trajectories simulated in parallel; 1 is bit-reproducible.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check that a solver or network commutes with its symmetry group.
    VerifySymmetry {
        #[arg(long, value_enum)]
        target: TargetArg,
        /// Use the collocated vector lifting (expected to fail).
        #[arg(long)]
        break_staggering: bool,
    },
    /// Fit a surrogate on the generated dataset.
    Train {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Accepted for symmetry with the other commands; training is serial.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Roll a checkpoint out from the test initial conditions.
    Rollout {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Recover velocities with the solver (required for SWE).
        #[arg(long)]
        hybrid: bool,
        #[arg(long)]
        steps: Option<usize>,
        /// Roll out the reference solver instead of the checkpoint.
        #[arg(long)]
        reference: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn run(cli: Cli) -> Result<i32> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::for_task(match cli.task {
            TaskArg::Swe => Task::Swe,
            TaskArg::Ins => Task::Ins,
        }),
    };
    match cli.cmd {
        Cmd::GenData { jobs } => {
            let m = gen_data(&cfg, jobs)?;
            println!(
                "wrote {} trajectories to {}",
                m.trajectories.len(),
                cfg.data_dir().display()
            );
        }
        Cmd::VerifySymmetry {
            target,
            break_staggering,
        } => {
            let target = match target {
                TargetArg::SweSolver => Target::SweSolver,
                TargetArg::InsSolver => Target::InsSolver,
                TargetArg::InputLayer => Target::InputLayer,
                TargetArg::FullNet => Target::FullNet,
            };
            let (rep, path) = verify_symmetry(&cfg, target, break_staggering)?;
            for line in rep.lines() {
                println!("{line}");
            }
            println!("report: {}", path.display());
            if !rep.passed {
                let w = rep.worst.as_ref().expect("failed reports have a worst element");
                eprintln!(
                    "symmetry violated: worst element {} with relative error {:.3e} (tolerance {:.1e})",
                    w.element, w.error, rep.tolerance
                );
                return Ok(EXIT_VIOLATION);
            }
        }
        Cmd::Train { mode, jobs: _ } => {
            let mode = mode.map(|m| match m {
                ModeArg::Standard => TrainMode::Standard,
                ModeArg::Pushforward => TrainMode::Pushforward,
                ModeArg::Augmented => TrainMode::Augmented,
            });
            let out = train_command(&cfg, mode, |e| {
                eprintln!(
                    "epoch {:>4}  train {:.6e}  val {:.6e}",
                    e.epoch, e.train_loss, e.val_loss
                )
            })?;
            let h = &out.history;
            println!(
                "best epoch {} (val {:.6e}); checkpoint {}",
                h.epochs[h.best].epoch,
                h.best_val(),
                out.checkpoint.display()
            );
        }
        Cmd::Rollout {
            checkpoint,
            hybrid,
            steps,
            reference,
            jobs: _,
        } => {
            let s = rollout_command(
                &cfg,
                &RolloutOptions {
                    checkpoint,
                    hybrid,
                    steps,
                    reference,
                },
            )?;
            println!(
                "{} over {} steps from {} initial conditions: mean {}-step NRMSE {}, {} diverged",
                s.predictor,
                s.steps,
                s.ics.len(),
                s.summary_steps,
                s.mean_nrmse.map_or("n/a".into(), |v| format!("{v:.4e}")),
                s.diverged
            );
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
