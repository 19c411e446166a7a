//! Command-line front end for the captioner.
//!
//! Subcommands cover the whole workflow: synthesize a dataset, build a
//! vocabulary, extract concept labels, run the two training stages,
//! caption images, evaluate a checkpoint, and dump attention maps.
//!
//! Exit codes: 0 on success, 2 for usage or configuration problems,
//! 3 for data problems (missing or malformed files), 4 for numeric
//! failures, with the failing step in the message.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vitcap_core::error::Error;
use vitcap_core::text::ConceptMode;

mod cmd;
mod config;

use cmd::{ExtractMode, SplitArg};
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "vitcap", version, about = "Detector-free image captioning with concept tokens")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape-caption dataset.
    GenSynthetic {
        /// Number of images.
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square image edge in pixels.
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        /// Fraction of images assigned to the validation split.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        /// Dataset directory (images/ and manifest.jsonl go here).
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a vocabulary from manifest captions.
    BuildVocab {
        #[arg(long)]
        manifest: PathBuf,
        /// Keep tokens seen at least this many times.
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-image concept labels as JSONL.
    ExtractConcepts {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: ExtractMode,
        /// TSV of image<TAB>token<TAB>score rows, for entries without
        /// manifest tags (external mode only).
        #[arg(long)]
        tags: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frequency table over an extracted label file.
    ConceptStats {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: pretrain the concept head on the focal loss.
    TrainConcepts {
        /// Run config JSON.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Stage two: joint caption training from a stage-one checkpoint.
    TrainCaption {
        /// Run config JSON (train.stage must be "joint").
        #[arg(long)]
        config: PathBuf,
        /// Stage-one checkpoint to start from.
        #[arg(long)]
        init: PathBuf,
        /// Distillation teacher checkpoint (overrides train.kd).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Caption images with a trained checkpoint.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        /// Image files (.ppm or .vtim), one JSON line each.
        #[arg(long, required = true, num_args = 1..)]
        image: Vec<PathBuf>,
        /// Beam width; greedy when absent.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score a checkpoint against a manifest split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Label derivation for entries without tags.
        #[arg(long, value_enum, default_value = "keywords")]
        concept_mode: ConceptModeArg,
        #[arg(long)]
        beam: Option<usize>,
        /// Directory for metrics.json and items.jsonl.
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Dump head-averaged attention maps as PGM images.
    AttnDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// One-based encoder block indices, comma separated.
        #[arg(long, required = true, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Clap-facing mirror of the library's concept mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ConceptModeArg {
    AllTokens,
    Keywords,
}

impl From<ConceptModeArg> for ConceptMode {
    fn from(m: ConceptModeArg) -> ConceptMode {
        match m {
            ConceptModeArg::AllTokens => ConceptMode::AllTokens,
            ConceptModeArg::Keywords => ConceptMode::Keywords,
        }
    }
}

fn load_run_config(path: &PathBuf, overrides: &Overrides) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenSynthetic {
            n,
            seed,
            image_size,
            val_fraction,
            out,
        } => cmd::gen_synthetic(n, seed, image_size, val_fraction, &out),
        Cmd::BuildVocab {
            manifest,
            min_count,
            out,
        } => cmd::build_vocab(&manifest, min_count, &out),
        Cmd::ExtractConcepts {
            manifest,
            mode,
            tags,
            out,
        } => cmd::extract_concepts(&manifest, mode, tags.as_deref(), &out),
        Cmd::ConceptStats { labels, out } => cmd::concept_stats(&labels, &out),
        Cmd::TrainConcepts { config, overrides } => {
            cmd::train_concepts(load_run_config(&config, &overrides)?)
        }
        Cmd::TrainCaption {
            config,
            init,
            teacher,
            overrides,
        } => cmd::train_caption(
            load_run_config(&config, &overrides)?,
            &init,
            teacher.as_deref(),
        ),
        Cmd::Caption { ckpt, image, beam } => cmd::caption(&ckpt, &image, beam),
        Cmd::Evaluate {
            ckpt,
            manifest,
            split,
            concept_mode,
            beam,
            out,
        } => cmd::evaluate(&ckpt, &manifest, split, concept_mode.into(), beam, &out),
        Cmd::AttnDump {
            ckpt,
            image,
            layers,
            out,
        } => cmd::attn_dump(&ckpt, &image, &layers, &out),
    }
}

/// Usage and config problems exit 2, data problems 3, numeric failures 4.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
