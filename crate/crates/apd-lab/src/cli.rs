//! Command-line surface. Every subcommand shares the same config plumbing:
//! an optional JSON file, repeatable `--set dotted.path=value` overrides,
//! and the `APD_SEED` environment variable on top.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands;
use crate::config::RunConfig;
use crate::error::{LabError, Result};

#[derive(Debug, Parser)]
#[command(name = "apd-lab", version, about = "Decoding experiments on a size-ordered family of tiny language models")]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one config value, e.g. `--set family.epochs=5`. Repeatable,
    /// applied in order.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub set: Vec<String>,

    /// Overwrite outputs that already exist.
    #[arg(long, global = true)]
    pub force: bool,

    /// Worker count. This build runs everything on one thread; the flag is
    /// validated and otherwise ignored.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    pub threads: usize,

    /// Also write plain x/y series files for plotting.
    #[arg(long, global = true)]
    pub plot_data: bool,

    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train the size-ordered model family on the corpus.
    TrainFamily,
    /// Run the family over the corpus and record candidate probabilities.
    CollectTraces,
    /// Fine-tune the amateur copy and energy network on the traces.
    TrainApd,
    /// Fit a decay curve to every traced candidate and dump the parameters.
    FitCurves,
    /// Sample continuations for each prompt from the configured sources.
    Decode {
        /// Prompt file, one prompt per line (default: paths.prompts).
        #[arg(long, value_name = "FILE")]
        prompts: Option<PathBuf>,
    },
    /// Score QA items across the strength grid and write reports.
    Evaluate {
        /// QA file (default: paths.qa).
        #[arg(long, value_name = "FILE")]
        qa: Option<PathBuf>,
        /// Generations file to score for diversity and repetition.
        #[arg(long, value_name = "FILE")]
        generations: Option<PathBuf>,
    },
    /// Check the contrast-equals-scaled-extrapolation identity on random
    /// logit lines.
    TheoremCheck {
        #[arg(long, default_value_t = 200)]
        lines: usize,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
        /// Defaults to the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the fixed obvious-vs-rare contrast scenario and print each
    /// method's pick.
    ProbeBlindness,
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(LabError::Config("--threads must be at least 1".into()));
    }
    let cfg = || RunConfig::resolve(cli.config.as_deref(), &cli.set);
    match &cli.cmd {
        Cmd::TrainFamily => commands::train_family(&cfg()?, cli.force),
        Cmd::CollectTraces => commands::collect_traces(&cfg()?, cli.force),
        Cmd::TrainApd => commands::train_apd(&cfg()?, cli.force),
        Cmd::FitCurves => commands::fit_curves(&cfg()?, cli.force),
        Cmd::Decode { prompts } => commands::decode(&cfg()?, prompts.as_deref(), cli.force),
        Cmd::Evaluate { qa, generations } => commands::evaluate(
            &cfg()?,
            qa.as_deref(),
            generations.as_deref(),
            cli.plot_data,
            cli.force,
        ),
        Cmd::TheoremCheck {
            lines,
            tolerance,
            seed,
        } => {
            let seed = match seed {
                Some(s) => *s,
                None => cfg()?.seed,
            };
            commands::theorem_check(*lines, *tolerance, seed)
        }
        Cmd::ProbeBlindness => commands::probe_blindness(),
    }
}
