//! `dlink` command-line driver.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime error,
//! 3 numeric divergence.

mod commands;
mod report;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use dlink::config::ExperimentConfig;
use dlink::training::{Baseline, ABLATION_NAMES};
use dlink::DlinkError;

use commands::{Ctx, DistillArgs};

#[derive(Parser)]
#[command(name = "dlink", version, about = "Spectral layer-routed distillation experiments")]
struct Cli {
    /// Root for relative `output_dir` values in configs.
    #[arg(long, global = true, env = "DLINK_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic epoch file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<run dir>/data.epochs`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `signal.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `data.samples`.
        #[arg(long)]
        samples: Option<usize>,
        /// Check that each class carries most power in its own band.
        #[arg(long)]
        verify: bool,
    },
    /// Pretrain (or initialise) the teacher and save its checkpoint.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        /// Epoch file to use instead of generating from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train students, with the router or a baseline objective.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "none", value_parser = clap::builder::PossibleValuesParser::new(ABLATION_NAMES))]
        ablation: String,
        /// none, no_distill, logit_kd or feature_mse.
        #[arg(long, default_value = "none")]
        baseline: String,
        /// Overrides `seeds`.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `<run dir>/teacher/teacher.ckpt`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a student checkpoint on one data split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to `eval_<split>.json` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear probe of every teacher layer.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Routing, spectrum and efficiency report over variant directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &DlinkError) -> u8 {
    match e {
        DlinkError::Config(_) | DlinkError::Usage(_) => 1,
        DlinkError::Divergence { .. } | DlinkError::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> dlink::Result<String> {
    let ctx = Ctx {
        output_root: cli.output_root,
    };
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            samples,
            verify,
        } => commands::gen_data(&ctx, ExperimentConfig::load(config)?, out, seed, samples, verify),
        Command::TrainTeacher { config, data } => {
            commands::train_teacher(&ctx, ExperimentConfig::load(config)?, data.as_deref())
        }
        Command::Distill {
            config,
            ablation,
            baseline,
            seeds,
            data,
            teacher,
        } => {
            let cfg = ExperimentConfig::load(config)?;
            let baseline: Baseline = baseline.parse()?;
            commands::distill(
                &ctx,
                cfg,
                DistillArgs {
                    ablation,
                    baseline,
                    seeds,
                    data,
                    teacher,
                },
            )
        }
        Command::Eval {
            config,
            student,
            data,
            split,
            out,
        } => commands::eval(ExperimentConfig::load(config)?, &student, data.as_deref(), &split, out),
        Command::Probe { config, teacher, data } => commands::probe(
            &ctx,
            ExperimentConfig::load(config)?,
            teacher.as_deref(),
            data.as_deref(),
        ),
        Command::Report { runs, out } => report::report(&runs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
