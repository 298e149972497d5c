mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patentner_core::Error;

use config::Mode;

/// Chemical named-entity recognition toolkit.
#[derive(Debug, Parser)]
#[command(name = "patentner", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize plain text from standard input, one `start end text` line per token.
    Tokenize {
        #[arg(long, value_enum, default_value_t = Mode::Chemical)]
        mode: Mode,
        /// TOML file with `no_split` and `suffixes` for the chemical tokenizer.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Document, sentence, token and entity counts of a column corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Document-level 60/10/30 split into train.txt, dev.txt and test.txt.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train, dev and test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.1, 0.3])]
        ratios: Vec<f64>,
    },
    /// Train the character-aware bidirectional language model.
    TrainBilm {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Column corpus, or plain text with `--text`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Read the corpus as plain text, split and tokenized.
        #[arg(long)]
        text: bool,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the tagger with early stopping on dev micro-F1.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Output directory for best.ckpt, last.ckpt and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Language model checkpoint for contextual features.
        #[arg(long)]
        bilm: Option<PathBuf>,
        /// Pre-trained word vectors in text format; frozen during training.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Keep only embedding rows whose word occurs in the corpus.
        #[arg(long)]
        restrict_embeddings: bool,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        /// Continue from last.ckpt and best.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Tag sentences with a trained model, writing the column format.
    Tag {
        #[arg(long)]
        model: PathBuf,
        /// Plain text, or a column file with `--columns`.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Take tokens from the first column of a column file.
        #[arg(long)]
        columns: bool,
        #[arg(long, value_enum, default_value_t = Mode::Chemical)]
        mode: Mode,
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Entity-level scores of predictions against gold annotations.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Write the token-level confusion matrix as CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
        /// Write up to `--error-limit` sentences with errors.
        #[arg(long)]
        errors: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        error_limit: usize,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of the full model at tiny dimensions.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            Error::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
