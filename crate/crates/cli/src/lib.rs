//! `tfmt` command line: corpus synthesis, training sweeps, evaluation,
//! pseudo-label audits, gradient checks and ablation tables.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod settings;

pub use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "tfmt", version, about = "Table filling via mean teacher for cross-domain triplet extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic source/target corpus.
    Synth(SynthArgs),
    /// Train one variant over a list of seeds.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled file.
    Eval(EvalArgs),
    /// Classify teacher pseudo labels against gold labels.
    Audit(AuditArgs),
    /// Finite-difference check of the training gradient on a micro model.
    Gradcheck(GradcheckArgs),
    /// Ablation rows and alpha/beta grids, averaged over seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct OutputArgs {
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Training hyperparameters; unset flags fall back to the config file and
/// then to the defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct HyperArgs {
    #[arg(long)]
    pub variant: Option<tfmt_core::Variant>,
    #[arg(long)]
    pub mode: Option<tfmt_core::TaskMode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Teacher EMA cadence: `step` or `epoch`.
    #[arg(long)]
    pub ema: Option<tfmt_core::EmaCadence>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub aug_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SeedArgs {
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory as written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub seeds: SeedArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Ablation switches, e.g. `no_uns,no_mmd`.
    #[arg(long)]
    pub ablate: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled corpus file.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Expected task mode; must match the checkpoint.
    #[arg(long)]
    pub mode: Option<tfmt_core::TaskMode>,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Score the teacher instead of the student.
    #[arg(long)]
    pub teacher: bool,
}

#[derive(Args, Debug, Clone)]
pub struct AuditArgs {
    /// Checkpoint whose teacher is audited; repeat to compare runs.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Labeled target file.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<tfmt_core::TaskMode>,
    /// `region` or `cell`.
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub seeds: SeedArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Rows to run, e.g. `none`, `no_aug`, `no_uns+no_mmd`; repeatable.
    /// Defaults to the full model, each single switch and no_uns+no_mmd.
    #[arg(long)]
    pub ablate: Vec<String>,
    /// Comma-separated alpha grid applied to the full model.
    #[arg(long)]
    pub alphas: Option<String>,
    /// Comma-separated beta grid applied to the full model.
    #[arg(long)]
    pub betas: Option<String>,
}

/// Parses `args` (program name first) and runs the subcommand; returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Audit(a) => commands::audit(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Ablate(a) => commands::ablate(&a),
    }
}
