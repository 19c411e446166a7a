//! Subcommand implementations.
//!
//! Each function maps one subcommand onto the library: data generation,
//! vocabulary and concept extraction, the two training stages, captioning,
//! evaluation, and attention dumps. Human-readable progress goes to
//! stderr; the machine-readable result of a command is a single JSON
//! line (or file) described in the README.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use vitcap_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use vitcap_core::data::{self, SynthConfig};
use vitcap_core::decoder::DecodeStrategy;
use vitcap_core::encoder;
use vitcap_core::error::{Error, Result};
use vitcap_core::model::{self, ModelConfig};
use vitcap_core::text::{stopwords, tokenize, ConceptMode, Vocab, TAG_LIMIT, TAG_SCORE_THRESHOLD};
use vitcap_core::train::{self, LossReport, TeacherHandle, STAGE_CONCEPTS, STAGE_JOINT};
use vitcap_core::{ParamSet, Tape, Tensor};

use crate::config::RunConfig;

// ---------------------------------------------------------------------
// Shared plumbing

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Loads a checkpoint together with the vocabulary stored inside it.
fn load_model(path: &Path) -> Result<(ParamSet<f32>, CheckpointMeta, Vocab)> {
    let (set, meta) = load_checkpoint::<f32>(path)?;
    let vocab = Vocab::from_tokens(meta.vocab.clone())?;
    Ok((set, meta, vocab))
}

/// Reads a `.ppm` or `.vtim` image and fits it to the model's input size.
fn read_input_image(path: &Path, cfg: &ModelConfig) -> Result<Tensor<f32>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let raw = match ext {
        "ppm" => data::read_ppm::<f32>(path)?,
        "vtim" => data::read_vtim::<f32>(path)?,
        _ => {
            return Err(Error::data(format!(
                "{}: unsupported image extension (want .ppm or .vtim)",
                path.display()
            )))
        }
    };
    data::prepare_image(&raw, cfg.encoder.image_height, cfg.encoder.image_width)
}

/// Per-step JSONL logger; also notes the last completed step so numeric
/// failures can be pinned to the step that blew up.
struct LossLog {
    out: BufWriter<File>,
    last_step: u64,
}

impl LossLog {
    fn create(dir: &Path) -> Result<LossLog> {
        let path = dir.join("loss.jsonl");
        let f = File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(LossLog {
            out: BufWriter::new(f),
            last_step: 0,
        })
    }

    fn record(&mut self, r: &LossReport) {
        self.last_step = r.step;
        let line = serde_json::to_string(r).expect("loss report serializes");
        let _ = writeln!(self.out, "{line}");
        if r.step % 50 == 0 {
            eprintln!("step {}: loss {:.6}", r.step, r.l_total);
        }
    }

    /// Pins a numeric error to the step that was running when it fired.
    fn pin_step(&self, err: Error) -> Error {
        match err {
            Error::Numeric(msg) => Error::Numeric(format!("step {}: {msg}", self.last_step + 1)),
            other => other,
        }
    }
}

fn write_json_file(path: &Path, value: &serde_json::Value) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("json value serializes");
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------
// Data commands

pub fn gen_synthetic(n: usize, seed: u64, image_size: usize, val_fraction: f64, out: &Path) -> Result<()> {
    let cfg = SynthConfig {
        count: n,
        seed,
        image_size,
        val_fraction,
    };
    ensure_dir(out)?;
    let entries = data::write_synthetic_dataset(out, &cfg)?;
    let val = entries.iter().filter(|e| e.split == data::Split::Val).count();
    println!(
        "{}",
        json!({
            "manifest": out.join("manifest.jsonl"),
            "images": entries.len(),
            "train": entries.len() - val,
            "val": val,
        })
    );
    Ok(())
}

pub fn build_vocab(manifest: &Path, min_count: usize, out: &Path) -> Result<()> {
    let entries = data::read_manifest(manifest)?;
    let vocab = Vocab::build(
        entries.iter().flat_map(|e| e.captions.iter().map(|c| c.as_str())),
        min_count,
    );
    vocab.save(out)?;
    println!(
        "{}",
        json!({ "vocab": out, "tokens": vocab.len(), "sha256": vocab.sha256_hex() })
    );
    Ok(())
}

/// Label source for `extract-concepts`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExtractMode {
    /// Every caption token.
    AllTokens,
    /// Caption tokens minus stopwords.
    Keywords,
    /// Tagger output: manifest tags, or a `--tags` TSV.
    External,
}

/// Tags for one entry: manifest tags win, then the TSV.
fn entry_tags<'a>(
    entry: &'a data::ManifestEntry,
    tsv: &'a BTreeMap<String, Vec<(String, f64)>>,
) -> Result<&'a [(String, f64)]> {
    if let Some(tags) = &entry.tags {
        return Ok(tags);
    }
    tsv.get(&entry.image)
        .map(|v| v.as_slice())
        .ok_or_else(|| Error::data(format!("{}: no tags in manifest or tags file", entry.image)))
}

pub fn extract_concepts(
    manifest: &Path,
    mode: ExtractMode,
    tags: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let entries = data::read_manifest(manifest)?;
    let tsv: BTreeMap<String, Vec<(String, f64)>> = match tags {
        Some(p) => data::read_tags_tsv(p)?.into_iter().collect(),
        None => BTreeMap::new(),
    };
    let f = File::create(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    let mut instances = 0usize;
    for entry in &entries {
        let tokens: Vec<String> = match mode {
            ExtractMode::AllTokens | ExtractMode::Keywords => {
                let mut set = BTreeSet::new();
                for cap in &entry.captions {
                    for tok in tokenize(cap) {
                        if mode == ExtractMode::Keywords && stopwords().contains(tok.as_str()) {
                            continue;
                        }
                        set.insert(tok);
                    }
                }
                set.into_iter().collect()
            }
            ExtractMode::External => {
                // Mirrors training-time tag handling: strict threshold,
                // score-descending cap, ties broken by token.
                let mut kept: Vec<(String, f64)> = entry_tags(entry, &tsv)?
                    .iter()
                    .filter(|(_, s)| *s > TAG_SCORE_THRESHOLD)
                    .cloned()
                    .collect();
                kept.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then_with(|| a.0.cmp(&b.0))
                });
                kept.truncate(TAG_LIMIT);
                let mut seen = BTreeSet::new();
                kept.into_iter()
                    .map(|(t, _)| t)
                    .filter(|t| seen.insert(t.clone()))
                    .collect()
            }
        };
        instances += tokens.len();
        let line = json!({ "image": entry.image, "tokens": tokens });
        writeln!(w, "{line}").map_err(|e| Error::io(out.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(out.display().to_string(), e))?;
    println!(
        "{}",
        json!({ "labels": out, "images": entries.len(), "instances": instances })
    );
    Ok(())
}

pub fn concept_stats(labels: &Path, out: &Path) -> Result<()> {
    let body =
        std::fs::read_to_string(labels).map_err(|e| Error::io(labels.display().to_string(), e))?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", labels.display(), i + 1)))?;
        let tokens = v
            .get("tokens")
            .and_then(|t| t.as_array())
            .ok_or_else(|| {
                Error::data(format!("{}:{}: missing tokens array", labels.display(), i + 1))
            })?;
        for t in tokens {
            let tok = t.as_str().ok_or_else(|| {
                Error::data(format!("{}:{}: non-string token", labels.display(), i + 1))
            })?;
            *counts.entry(tok.to_string()).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::data(format!("{}: no concept tokens", labels.display())));
    }
    // Long-tail view: highest count first, cumulative share alongside.
    let mut rows: Vec<(&String, &usize)> = counts.iter().collect();
    rows.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let f = File::create(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "token\tcount\tshare\tcumulative")
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut cum = 0.0f64;
    for (tok, &count) in rows {
        let share = count as f64 / total as f64;
        cum += share;
        writeln!(w, "{tok}\t{count}\t{share:.6}\t{cum:.6}")
            .map_err(|e| Error::io(out.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(out.display().to_string(), e))?;
    println!(
        "{}",
        json!({ "stats": out, "distinct": counts.len(), "instances": total })
    );
    Ok(())
}

// ---------------------------------------------------------------------
// Training commands

fn run_dir_setup(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.data.out_dir.clone();
    ensure_dir(&dir)?;
    cfg.write_resolved(&dir)?;
    Ok(dir)
}

fn checkpoint_meta(
    model: &ModelConfig,
    vocab: &Vocab,
    stage: &str,
    step: u64,
) -> CheckpointMeta {
    CheckpointMeta {
        config_hash: model.sha256_hex(),
        vocab_hash: vocab.sha256_hex(),
        stage: stage.to_string(),
        step,
        vocab: vocab.tokens().to_vec(),
        model: *model,
    }
}

fn load_examples(
    cfg: &RunConfig,
    vocab: &Vocab,
    model_cfg: &ModelConfig,
) -> Result<(Vec<train::TrainExample<f32>>, usize)> {
    let ds = train::load_dataset::<f32>(
        &cfg.data.manifest,
        vocab,
        cfg.data.concept_mode,
        model_cfg,
    )?;
    let examples =
        train::training_examples(&ds.train, vocab, model_cfg.decoder.max_caption_len)?;
    Ok((examples, ds.train.len()))
}

fn summary(checkpoint: &Path, reports: &[LossReport]) -> serde_json::Value {
    let last = reports.last().expect("training produced steps");
    json!({
        "checkpoint": checkpoint,
        "steps": reports.len(),
        "final_loss": last.l_total,
    })
}

pub fn train_concepts(mut cfg: RunConfig) -> Result<()> {
    let vocab = Vocab::load(&cfg.data.vocab)?;
    let model_cfg = cfg.model(vocab.len());
    model_cfg.validate()?;
    cfg.train.validate()?;
    cfg.train.kd = None;
    let (examples, images) = load_examples(&cfg, &vocab, &model_cfg)?;
    let dir = run_dir_setup(&cfg)?;
    eprintln!(
        "stage one: {} examples over {images} images, vocabulary {}",
        examples.len(),
        vocab.len()
    );
    let mut set = model::init_params::<f32>(&model_cfg, cfg.train.seed)?;
    let mut log = LossLog::create(&dir)?;
    let reports = train::train_stage1(&mut set, &model_cfg, &examples, &cfg.train, |r| {
        log.record(r)
    })
    .map_err(|e| log.pin_step(e))?;
    let ckpt = dir.join("concepts.vtck");
    let meta = checkpoint_meta(&model_cfg, &vocab, STAGE_CONCEPTS, reports.len() as u64);
    save_checkpoint(&ckpt, &set, &meta)?;
    println!("{}", summary(&ckpt, &reports));
    Ok(())
}

/// Loads a distillation teacher and refuses one whose vocabulary differs
/// from the student's.
fn load_teacher(path: &Path, student_vocab_hash: &str) -> Result<TeacherHandle<f32>> {
    let (set, meta) = load_checkpoint::<f32>(path)?;
    if meta.vocab_hash != student_vocab_hash {
        return Err(Error::config(format!(
            "teacher {} was trained with a different vocabulary",
            path.display()
        )));
    }
    TeacherHandle::new(set, meta.model, meta.vocab_hash)
}

pub fn train_caption(mut cfg: RunConfig, init: &Path, teacher_flag: Option<&Path>) -> Result<()> {
    let vocab = Vocab::load(&cfg.data.vocab)?;
    let model_cfg = cfg.model(vocab.len());
    model_cfg.validate()?;
    cfg.train.validate()?;
    let (mut set, meta) = load_checkpoint::<f32>(init)?;
    if meta.vocab_hash != vocab.sha256_hex() {
        return Err(Error::config(format!(
            "{} was trained with a different vocabulary than {}",
            init.display(),
            cfg.data.vocab.display()
        )));
    }
    if meta.model != model_cfg {
        return Err(Error::config(format!(
            "model config does not match the checkpoint's (got {}, checkpoint {})",
            model_cfg.sha256_hex(),
            meta.config_hash
        )));
    }
    // The flag wins over the config file; the choice lands in
    // resolved.json either way.
    if let Some(t) = teacher_flag {
        cfg.train.kd = Some(t.to_path_buf());
    }
    let teacher = match &cfg.train.kd {
        Some(p) => Some(load_teacher(p, &meta.vocab_hash)?),
        None => None,
    };
    let (examples, images) = load_examples(&cfg, &vocab, &model_cfg)?;
    let dir = run_dir_setup(&cfg)?;
    if meta.stage == STAGE_CONCEPTS && model_cfg.feature_copy_applicable() {
        let copied = model::copy_ctn_blocks_into_feature(&mut set, &model_cfg)?;
        eprintln!("seeded {copied} feature-branch tensors from the concept blocks");
    }
    eprintln!(
        "stage two: {} examples over {images} images{}",
        examples.len(),
        if teacher.is_some() { ", with a teacher" } else { "" }
    );
    let mut log = LossLog::create(&dir)?;
    let reports = train::train_stage2(
        &mut set,
        &model_cfg,
        &examples,
        &cfg.train,
        teacher.as_ref(),
        |r| log.record(r),
    )
    .map_err(|e| log.pin_step(e))?;
    let ckpt = dir.join("caption.vtck");
    let meta = checkpoint_meta(&model_cfg, &vocab, STAGE_JOINT, reports.len() as u64);
    save_checkpoint(&ckpt, &set, &meta)?;
    println!("{}", summary(&ckpt, &reports));
    Ok(())
}

// ---------------------------------------------------------------------
// Inference commands

fn strategy_for(beam: Option<usize>) -> DecodeStrategy {
    match beam {
        Some(w) => DecodeStrategy::Beam { width: w },
        None => DecodeStrategy::Greedy,
    }
}

pub fn caption(ckpt: &Path, images: &[PathBuf], beam: Option<usize>) -> Result<()> {
    let (set, meta, vocab) = load_model(ckpt)?;
    let strategy = strategy_for(beam);
    for path in images {
        let image = read_input_image(path, &meta.model)?;
        let (out, concepts) = model::caption_image(&set, &meta.model, &image, strategy)?;
        let text = vocab.decode(&out.ids)?;
        let named: Vec<(String, f64)> = concepts
            .top
            .iter()
            .map(|&(id, p)| Ok((vocab.token(id)?.to_string(), p as f64)))
            .collect::<Result<_>>()?;
        println!(
            "{}",
            json!({
                "image": path,
                "caption": text,
                "logprob": out.total_logprob as f64,
                "concepts": named,
            })
        );
    }
    Ok(())
}

/// Manifest split selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

pub fn evaluate(
    ckpt: &Path,
    manifest: &Path,
    split: SplitArg,
    concept_mode: ConceptMode,
    beam: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (set, meta, vocab) = load_model(ckpt)?;
    let ds = train::load_dataset::<f32>(manifest, &vocab, concept_mode, &meta.model)?;
    let records = match split {
        SplitArg::Train => &ds.train,
        SplitArg::Val => &ds.val,
    };
    let outcome = train::evaluate_model(&set, &meta.model, &vocab, records, strategy_for(beam))?;
    ensure_dir(out)?;
    let items_path = out.join("items.jsonl");
    let f = File::create(&items_path)
        .map_err(|e| Error::io(items_path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    for item in &outcome.items {
        let line = serde_json::to_string(item).expect("eval item serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(items_path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(items_path.display().to_string(), e))?;
    let metrics = json!({
        "split": match split { SplitArg::Train => "train", SplitArg::Val => "val" },
        "images": outcome.items.len(),
        "bleu4": outcome.bleu4,
        "consensus": outcome.consensus,
        "concept_recall": outcome.concept_recall,
    });
    write_json_file(&out.join("metrics.json"), &metrics)?;
    println!("{metrics}");
    Ok(())
}

// ---------------------------------------------------------------------
// Attention dumps

/// Head-averaged attention for one block, read off the tape.
fn head_mean(tape: &Tape<f32>, heads: &[vitcap_core::VarId]) -> Vec<f32> {
    let first = tape.value(heads[0]);
    let mut acc = vec![0.0f32; first.data().len()];
    for &h in heads {
        for (a, &v) in acc.iter_mut().zip(tape.value(h).data()) {
            *a += v;
        }
    }
    let inv = 1.0 / heads.len() as f32;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Scales a map so its peak is full white, then writes it as PGM.
fn write_normalized_pgm(path: &Path, side: usize, map: &[f32]) -> Result<()> {
    let max = map.iter().cloned().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    let scaled: Vec<f32> = map.iter().map(|&v| v * scale).collect();
    let t = Tensor::new(vec![side, side], scaled)?;
    data::write_pgm(path, &t)
}

pub fn attn_dump(ckpt: &Path, image: &Path, layers: &[usize], out: &Path) -> Result<()> {
    let (set, meta, _vocab) = load_model(ckpt)?;
    let cfg = &meta.model;
    let depth = cfg.encoder.depth;
    let mut wanted: Vec<usize> = layers.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    if wanted.is_empty() {
        return Err(Error::config("no layers requested".to_string()));
    }
    for &l in &wanted {
        if l == 0 || l > depth {
            return Err(Error::config(format!(
                "layer {l} out of range (encoder has {depth} blocks, layers are 1-based)"
            )));
        }
    }
    let pixels = read_input_image(image, cfg)?;
    let patches = encoder::patchify(&pixels, cfg.encoder.patch_size)?;
    let mut tape = Tape::new();
    let vars = encoder::encode(&mut tape, &set, &cfg.encoder, &patches, false, true)?;
    let side = cfg.encoder.patch_count() + 1;
    ensure_dir(out)?;
    let mut mean = vec![0.0f32; side * side];
    let mut files = Vec::new();
    for &l in &wanted {
        let map = head_mean(&tape, &vars.attn[l - 1]);
        for (m, &v) in mean.iter_mut().zip(&map) {
            *m += v / wanted.len() as f32;
        }
        let path = out.join(format!("layer{l}.pgm"));
        write_normalized_pgm(&path, side, &map)?;
        files.push(path);
    }
    let mean_path = out.join("mean.pgm");
    write_normalized_pgm(&mean_path, side, &mean)?;
    files.push(mean_path);
    println!(
        "{}",
        json!({ "files": files, "side": side, "layers": wanted })
    );
    Ok(())
}

// ---------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_picks_beam_only_when_asked() {
        assert_eq!(strategy_for(None), DecodeStrategy::Greedy);
        assert_eq!(strategy_for(Some(3)), DecodeStrategy::Beam { width: 3 });
    }

    #[test]
    fn numeric_errors_get_a_step_number() {
        let dir = tempfile::tempdir().unwrap();
        let log = LossLog::create(dir.path()).unwrap();
        let pinned = log.pin_step(Error::numeric("loss is not finite".to_string()));
        assert!(pinned.to_string().contains("step 1"));
        let other = log.pin_step(Error::data("x".to_string()));
        assert!(matches!(other, Error::Data(_)));
    }

    #[test]
    fn normalized_pgm_peaks_at_white() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_normalized_pgm(&p, 2, &[0.1, 0.2, 0.4, 0.4]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[64, 128, 255, 255]);
    }
}
