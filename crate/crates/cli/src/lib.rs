//! Command-line front end: config loading, subcommands and plots.

pub mod commands;
pub mod error;
pub mod plot;
pub mod settings;

use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

pub use error::{CliError, Result};
use settings::{keys_help, load_config, Overrides};

#[derive(Debug, Parser)]
#[command(name = "fasq", version, about = "Instruction-tuned face anti-spoofing on a synthetic benchmark")]
pub struct Cli {
    /// TOML or JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` (and IFLIP_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `out_dir` (and IFLIP_OUT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the meta, held-out and target splits under OUT/data.
    GenData,
    /// Pretrain and freeze the language model; writes OUT/lm.
    PretrainLm,
    /// Train one model; writes OUT/checkpoint, OUT/metrics.jsonl and OUT/manifest.json.
    Train {
        /// Splits written by gen-data; regenerated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Language model written by pretrain-lm; pretrained on the fly otherwise.
        #[arg(long)]
        lm: Option<PathBuf>,
    },
    /// Evaluate checkpoints (one per seed) or fresh untrained models.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "untrained")]
        checkpoint: Vec<PathBuf>,
        /// Evaluate freshly initialised models, one per replicate seed.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
    },
    /// Run an ablation suite and print its table.
    Ablate {
        /// branches, head_mode, granularity, style_prompt_count, lambda_sweep,
        /// qformer_depth, binary_mode or llm_free_timing.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score one PNG; prints the fake score and decoded answers, writes OUT/cue.png.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Drop the language model and report the score only.
        #[arg(long)]
        llm_free: bool,
    },
    /// ROC curves, a cue-map grid and loss curves under OUT/plots.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// metrics.jsonl from train; defaults to the one next to the checkpoint.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Samples in the cue-map grid.
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Finite-difference gradient check of every component; writes OUT/gradcheck.json.
    Gradcheck {
        /// Coordinates checked per component.
        #[arg(long, default_value_t = 64)]
        trials: usize,
    },
}

/// Parses arguments with the config key listing attached to `--help`.
pub fn parse_args<I, S>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let help = keys_help();
    let matches = Cli::command().after_help(help.clone()).after_long_help(help).try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

/// Runs one parsed invocation and returns its JSON summary.
pub fn run(cli: &Cli, env: impl Fn(&str) -> Option<String>) -> Result<serde_json::Value> {
    let overrides = Overrides::resolve(cli.seed, cli.out.clone(), env)?;
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::PretrainLm => commands::pretrain(&cfg),
        Command::Train { data, lm } => commands::train(&cfg, data.as_deref(), lm.as_deref()),
        Command::Eval { data, checkpoint, untrained } => commands::eval(&cfg, data.as_deref(), checkpoint, *untrained),
        Command::Ablate { suite, data } => commands::ablate(&cfg, data.as_deref(), suite),
        Command::Infer { image, checkpoint, llm_free } => commands::infer(&cfg, checkpoint, image, *llm_free),
        Command::Plot { checkpoint, data, metrics, samples } => commands::plot(&cfg, data.as_deref(), checkpoint, metrics.as_deref(), *samples),
        Command::Gradcheck { trials } => commands::gradcheck(&cfg, *trials),
    }
}
