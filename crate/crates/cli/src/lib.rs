//! `ftmssm` command-line driver.

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Prompt;
use crate::config::RunConfig;
pub use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "ftmssm", version, about = "Frequency/text-modulated SSM motion diffusion at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root seed for this command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic corpus as line-delimited JSON.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser; writes checkpoint.bin and loss.csv into --out.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to train.steps.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate latents from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "class", required_unless_present = "class")]
        text: Option<String>,
        /// Motion family; its templates are used round-robin.
        #[arg(long)]
        class: Option<String>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-sample SVG plots.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Compute FID, R-Precision, MM-Dist, Diversity and MModality.
    Eval {
        /// Held-out real corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Without a checkpoint the corpus is scored against itself.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference audit of every block.
    Gradcheck {
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Audit only a fixture whose adjoint is deliberately wrong.
        #[arg(long)]
        negative_control: bool,
    },
    /// Comparison table and loss plot from earlier outputs.
    Report {
        /// metrics.json files from `eval`.
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
        /// loss.csv files from `train`.
        #[arg(long = "loss")]
        losses: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let g = &cli.global;
    let cfg = RunConfig::load(g.config.as_deref(), &g.overrides, g.seed)?;
    match &cli.command {
        Command::GenData { out } => commands::gen_data(&cfg, out),
        Command::Train { corpus, out, resume } => commands::train(&cfg, corpus, out, resume.as_deref()),
        Command::Sample { checkpoint, text, class, count, out, svg } => {
            let prompt = match (text, class) {
                (Some(t), _) => Prompt::Text(t.clone()),
                (None, Some(c)) => Prompt::Class(c.clone()),
                (None, None) => return Err(CliError::usage("pass --text or --class")),
            };
            commands::sample_cmd(&cfg, checkpoint, &prompt, *count, out, svg.as_deref())
        }
        Command::Eval { corpus, checkpoint, out } => commands::eval_cmd(&cfg, corpus, checkpoint.as_deref(), out),
        Command::Gradcheck { out, negative_control } => commands::gradcheck(&cfg, *negative_control, out.as_deref()),
        Command::Report { evals, losses, out } => commands::report(evals, losses, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            let _ = writeln!(std::io::stdout(), "{}", msg.trim_end());
            0
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {}", e.to_string().trim_end());
            e.exit_code()
        }
    }
}
