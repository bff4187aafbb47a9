//! The `mvaema` command line.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
pub mod config;
pub mod error;

pub use error::{code, CliError};

#[derive(Debug, Parser)]
#[command(name = "mvaema", version, about = "Electron-micrograph vision-language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Args)]
pub(crate) struct Common {
    /// Flat JSON config file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write procedural micrographs, a manifest, a morphology dataset and
    /// canned teacher responses.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        per_category: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Prompt a teacher for every manifest image and write a JSONL dataset.
    GenData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Canned response directory (default: `mock/` next to the manifest).
        #[arg(long, conflicts_with = "live")]
        mock_dir: Option<PathBuf>,
        /// Call the configured endpoint; needs MVAEMA_API_KEY.
        #[arg(long)]
        live: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a JSONL dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate answers for a dataset and score them.
    EvalVqa {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Zero-shot classification report (Top-k, P/R/F1, confusion).
    EvalClassify {
        #[arg(long, requires = "data", conflicts_with = "predictions")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSONL of `{"label": .., "ranking": [..]}` to score without a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Answer one question about one image, or a JSONL batch.
    Answer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required_unless_present = "batch", requires = "question")]
        image: Option<PathBuf>,
        #[arg(long)]
        question: Option<String>,
        /// JSONL of `{"image_path": .., "instruction": ..}`.
        #[arg(long, conflicts_with = "image")]
        batch: Option<PathBuf>,
        /// Batch output file (default: stdout).
        #[arg(long, requires = "batch")]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Retrain every ablated variant and compare against the full model.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Runs one command line and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { code::USAGE } else { code::OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::SynthData { out, per_category, common } => commands::synth_data(&common, &out, per_category),
        Command::GenData {
            manifest,
            out,
            mock_dir,
            live,
            common,
        } => commands::gen_data(&common, &manifest, &out, mock_dir.as_deref(), live),
        Command::Train {
            data,
            val_data,
            out,
            common,
        } => commands::train(&common, &data, val_data.as_deref(), &out),
        Command::EvalVqa { ckpt, data, out, common } => commands::eval_vqa(&common, &ckpt, &data, out.as_deref()),
        Command::EvalClassify {
            ckpt,
            data,
            predictions,
            out,
            common,
        } => commands::eval_classify(&common, ckpt.as_deref(), data.as_deref(), predictions.as_deref(), out.as_deref()),
        Command::Answer {
            ckpt,
            image,
            question,
            batch,
            output,
            common,
        } => commands::answer(&common, &ckpt, image.as_deref(), question.as_deref(), batch.as_deref(), output.as_deref()),
        Command::Ablate {
            data,
            eval_data,
            out,
            common,
        } => commands::ablate(&common, &data, eval_data.as_deref(), &out),
    };
    match result {
        Ok(()) => code::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
