//! `belle`: corpus generation, training, generation, evaluation and
//! self-verification.

mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "belle", version, about = "Evidential autoregressive frame generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

/// Flags every command accepts.
#[derive(Args, Debug, Clone)]
struct Shared {
    /// Flat key=value config file (see the key list below)
    #[arg(long)]
    config: Option<PathBuf>,

    /// Seed of the command's random streams [default: the config value, 0 unless set]
    #[arg(long)]
    seed: Option<u64>,

    /// Override one config key, e.g. --set train.steps=100 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Commands {
    /// Generate the synthetic multi-speaker corpus
    GenCorpus {
        /// Output corpus file
        #[arg(long, default_value = "corpus.belm")]
        out: PathBuf,
        /// Number of utterances (corpus.num_utterances)
        #[arg(long)]
        utterances: Option<usize>,
        /// Content vocabulary size (corpus.vocab_size)
        #[arg(long)]
        vocab_size: Option<usize>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Train a model; writes checkpoints, a metrics log and the effective config
    Train {
        /// Corpus file produced by gen-corpus
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Optimizer steps (train.steps)
        #[arg(long)]
        steps: Option<usize>,
        /// Number of sources: the original plus teachers-1 simulated teachers (train.teachers)
        #[arg(long)]
        teachers: Option<usize>,
        /// Feed the predicted location to the denoiser instead of a sample
        #[arg(long)]
        ablate_sampling: bool,
        /// Drop the flux term (train.lambda_flux = 0)
        #[arg(long)]
        ablate_flux: bool,
        /// Output head and sampling loss
        #[arg(long, value_enum, default_value_t = Baseline::Belle)]
        baseline: Baseline,
        /// Start from these weights instead of a fresh initialisation
        #[arg(long)]
        init: Option<PathBuf>,
        /// Suppress progress lines
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        shared: Shared,
    },
    /// Generate one utterance; writes a corpus-format file and a JSON report
    Generate {
        #[command(flatten)]
        target: Target,
        /// continuation: prompt with the utterance's first tokens and frames;
        /// cross-sentence: prompt with a whole other utterance
        #[arg(long, value_enum, default_value_t = Mode::Continuation)]
        mode: Mode,
        /// Prompt utterance in cross-sentence mode [default: index - 1, wrapping]
        #[arg(long)]
        prompt_index: Option<usize>,
        /// Output corpus file; the report goes to <out>.json
        #[arg(long, default_value = "generated.belm")]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Generate the utterance text chunk by chunk without a prompt, printing
    /// one timing line per emitted chunk
    StreamGenerate {
        #[command(flatten)]
        target: Target,
        /// Text tokens per chunk (generate.chunk_text)
        #[arg(long)]
        chunk_text: Option<usize>,
        /// Frames per non-final chunk (generate.chunk_audio)
        #[arg(long)]
        chunk_audio: Option<usize>,
        /// Output corpus file; the report goes to <out>.json
        #[arg(long, default_value = "streamed.belm")]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Score held-out continuations: token error rate, frame MSE, stop timing, diversity
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// JSON report
        #[arg(long, default_value = "eval.json")]
        out: PathBuf,
        /// Sampling spread multiplier (eval.beta_scale)
        #[arg(long)]
        beta_scale: Option<f64>,
        /// Prompts for the repeated-sampling diversity metrics (eval.diversity_prompts)
        #[arg(long)]
        diversity_prompts: Option<usize>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Run a self-check suite and print one PASS/FAIL line per check
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        /// Optional JSON report
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        shared: Shared,
    },
}

/// Model, corpus and what to say.
#[derive(Args, Debug, Clone)]
struct Target {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus providing prompts and the token decoder
    #[arg(long)]
    corpus: PathBuf,
    /// Utterance whose text is spoken
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Comma-separated token ids replacing the utterance text
    #[arg(long, value_delimiter = ',')]
    text: Option<Vec<usize>>,
    /// Sampling spread multiplier (generate.beta_scale)
    #[arg(long)]
    beta_scale: Option<f64>,
    /// Frame budget (generate.max_frames)
    #[arg(long)]
    max_frames: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Continuation,
    CrossSentence,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Baseline {
    /// Evidential head with hierarchical sampling
    Belle,
    /// Gaussian head with reparameterised sampling and a KL loss (train.lambda_samp = 0.1)
    Melle,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Suite {
    Consistency,
    Gradcheck,
    Sampler,
    All,
}

fn main() -> ExitCode {
    let help = settings::defaults_help();
    let cmd = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|s| s.after_help(help.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn split_override(raw: &str) -> Result<(String, String), CliError> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {raw:?}")))
}
