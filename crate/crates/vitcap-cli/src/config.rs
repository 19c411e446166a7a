//! Run configuration files.
//!
//! A run config is a single JSON object with one section per module:
//! `encoder`, `ctn`, `decoder`, `train`, and `data`. Every section is
//! optional and every field within a section falls back to its default,
//! but unknown keys anywhere are an error, so typos fail loudly instead
//! of silently training the wrong model. The fully merged view is echoed
//! to `resolved.json` in the run directory; feeding that file back in
//! reproduces the run bit for bit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use vitcap_core::ctn::CtnConfig;
use vitcap_core::decoder::DecoderConfig;
use vitcap_core::encoder::EncoderConfig;
use vitcap_core::error::{Error, Result};
use vitcap_core::model::ModelConfig;
use vitcap_core::text::ConceptMode;
use vitcap_core::train::{Stage, TrainConfig};

/// Where the data lives and how concept labels are derived from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// JSONL manifest; image paths inside are relative to its directory.
    pub manifest: PathBuf,
    /// Newline-separated token list produced by `build-vocab`.
    pub vocab: PathBuf,
    /// Label derivation for entries without explicit tags.
    pub concept_mode: ConceptMode,
    /// Run directory for logs, `resolved.json`, and checkpoints.
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: PathBuf::from("manifest.jsonl"),
            vocab: PathBuf::from("vocab.txt"),
            concept_mode: ConceptMode::Keywords,
            out_dir: PathBuf::from("run"),
        }
    }
}

/// One fully resolved run: model sections, training schedule, data.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub ctn: CtnConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Raw file form. The train section stays opaque here because its
/// defaults depend on the stage it declares.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawRunConfig {
    encoder: EncoderConfig,
    ctn: CtnConfig,
    decoder: DecoderConfig,
    train: Value,
    data: DataConfig,
}

/// Resolves the train section. `{"stage": "joint"}` starts from the
/// joint-stage defaults (higher rate, more epochs), everything else from
/// the concept-stage defaults; explicit keys then win field by field.
fn resolve_train(raw: Value) -> Result<TrainConfig> {
    let raw = match raw {
        Value::Null => return Ok(TrainConfig::concepts()),
        Value::Object(map) => map,
        other => {
            return Err(Error::config(format!(
                "train section must be an object, got {other}"
            )))
        }
    };
    let stage = match raw.get("stage") {
        Some(v) => serde_json::from_value::<Stage>(v.clone())
            .map_err(|e| Error::config(format!("train.stage: {e}")))?,
        None => Stage::Concepts,
    };
    let base = match stage {
        Stage::Concepts => TrainConfig::concepts(),
        Stage::Joint => TrainConfig::joint(),
    };
    let mut merged = match serde_json::to_value(&base) {
        Ok(Value::Object(map)) => map,
        _ => unreachable!("TrainConfig serializes to an object"),
    };
    for (k, v) in raw {
        merged.insert(k, v);
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::config(format!("train section: {e}")))
}

impl RunConfig {
    /// Loads and resolves a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let raw: RawRunConfig = serde_json::from_str(&body)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(RunConfig {
            encoder: raw.encoder,
            ctn: raw.ctn,
            decoder: raw.decoder,
            train: resolve_train(raw.train)?,
            data: raw.data,
        })
    }

    /// Model view with the vocabulary size filled in from the actual
    /// vocabulary file.
    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            ctn: self.ctn,
            decoder: self.decoder,
            vocab_size,
        }
    }

    /// Echoes the merged view into the run directory.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("resolved.json");
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
        std::fs::write(&path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Command-line overrides applied on top of the file. Flags beat the
/// file, the file beats the defaults.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct Overrides {
    /// Dataset manifest (overrides data.manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Vocabulary file (overrides data.vocab).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Run directory (overrides data.out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base learning rate (overrides train.base_lr).
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// Epoch count (overrides train.epochs).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hard step cap, 0 means epochs decide (overrides train.max_steps).
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Batch size (overrides train.batch_size).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Run seed (overrides train.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads, 0 means all available (overrides train.threads).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.manifest {
            cfg.data.manifest = p.clone();
        }
        if let Some(p) = &self.vocab {
            cfg.data.vocab = p.clone();
        }
        if let Some(p) = &self.out {
            cfg.data.out_dir = p.clone();
        }
        if let Some(v) = self.base_lr {
            cfg.train.base_lr = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.max_steps {
            cfg.train.max_steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.threads {
            cfg.train.threads = v;
        }
    }
}
