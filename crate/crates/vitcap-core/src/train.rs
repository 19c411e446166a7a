//! Two-stage training.
//!
//! Stage one trains the encoder stem and the concept head on the focal
//! multi-label loss alone, with a linearly decaying learning rate. Stage
//! two trains the whole model jointly: concept loss plus masked caption
//! loss plus, when a teacher is supplied, a distillation term on the same
//! masked positions. Pretrained groups (stem and concept blocks) run at a
//! reduced rate in stage two; freshly initialized feature blocks can first
//! be seeded from the trained concept blocks with
//! [`crate::model::copy_ctn_blocks_into_feature`], which callers invoke
//! explicitly between the stages.
//!
//! Batches are data-parallel: every item builds its own tape, and the
//! per-item gradients are reduced in item order, so results are identical
//! for any worker count.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctn;
use crate::data::{self, Split};
use crate::decoder::{self, DecodeStrategy};
use crate::encoder;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, ModelConfig};
use crate::optim::{AdamW, AdamWConfig, GroupLrs};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::text::{concept_labels, labels_from_tags, ConceptLabelSet, ConceptMode, Vocab};

/// Checkpoint stage label written after concept pretraining.
pub const STAGE_CONCEPTS: &str = "concepts";
/// Checkpoint stage label written after joint caption training.
pub const STAGE_JOINT: &str = "joint";

/// Which training stage a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Concept pretraining: focal loss only.
    Concepts,
    /// Joint caption training: focal plus masked caption loss.
    Joint,
}

/// Where the decoder's concept tokens come from during stage two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptSource {
    /// Top scores from the model's own concept head (the default; what
    /// inference does too).
    Predicted,
    /// Ground-truth label ids, ascending, capped at `top_k`.
    GroundTruth,
    /// Per item, ground truth with probability `p`, otherwise predicted.
    Mixed { p: f64 },
    /// No concept tokens at all (ablation).
    NoConcepts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub base_lr: f64,
    /// Stage-two divisor for the pretrained groups (stem and concept
    /// blocks run at `base_lr / alpha`).
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; zero means run all epochs.
    pub max_steps: usize,
    /// Per-position masking probability for the caption corruption.
    pub mask_prob: f64,
    pub concept_source: ConceptSource,
    /// Teacher checkpoint for distillation. The training loop itself takes
    /// a loaded [`TeacherHandle`]; this path is for callers that resolve
    /// configs into one.
    pub kd: Option<std::path::PathBuf>,
    pub seed: u64,
    /// Worker threads for the batch; zero picks the pool default.
    pub threads: usize,
    pub augment: bool,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::concepts()
    }
}

impl TrainConfig {
    /// Stage-one defaults.
    pub fn concepts() -> TrainConfig {
        TrainConfig {
            stage: Stage::Concepts,
            base_lr: 5e-5,
            alpha: 10.0,
            batch_size: 8,
            epochs: 10,
            max_steps: 0,
            mask_prob: 0.15,
            concept_source: ConceptSource::Predicted,
            kd: None,
            seed: 0,
            threads: 0,
            augment: false,
            optimizer: AdamWConfig::default(),
        }
    }

    /// Stage-two defaults: higher rate, longer schedule.
    pub fn joint() -> TrainConfig {
        TrainConfig {
            stage: Stage::Joint,
            base_lr: 1e-4,
            epochs: 30,
            ..TrainConfig::concepts()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "alpha must be at least 1, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive".to_string()));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return Err(Error::config(
                "either epochs or max_steps must be positive".to_string(),
            ));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::config(format!(
                "mask_prob must be in (0, 1), got {}",
                self.mask_prob
            )));
        }
        if let ConceptSource::Mixed { p } = self.concept_source {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::config(format!(
                    "mixed concept source needs p in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// One loss record per optimizer step. `l_total` is always the exact sum
/// of the three components, and `lr` holds the learning rate each
/// parameter group saw at that step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_vc: f64,
    pub l_cap: f64,
    pub l_dis: f64,
    pub l_total: f64,
    pub lr: GroupLrs,
}

impl LossReport {
    fn new(step: u64, l_vc: f64, l_cap: f64, l_dis: f64, lr: GroupLrs) -> LossReport {
        LossReport {
            step,
            l_vc,
            l_cap,
            l_dis,
            l_total: l_vc + l_cap + l_dis,
            lr,
        }
    }
}

// ---------------------------------------------------------------------
// Dataset assembly

/// One image with everything training and evaluation need.
#[derive(Debug, Clone)]
pub struct ImageRecord<T> {
    /// Image path as it appears in the manifest.
    pub name: String,
    /// Prepared `[H, W, 3]` pixels matching the encoder's input size.
    pub image: Tensor<T>,
    /// Reference captions, verbatim.
    pub captions: Vec<String>,
    pub labels: ConceptLabelSet,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset<T> {
    pub train: Vec<ImageRecord<T>>,
    pub val: Vec<ImageRecord<T>>,
}

/// Loads a manifest into memory. Concept labels come from the entry's tag
/// list when one is present, otherwise from the union of its captions
/// under `mode`.
pub fn load_dataset<T: Scalar>(
    manifest: &Path,
    vocab: &Vocab,
    mode: ConceptMode,
    cfg: &ModelConfig,
) -> Result<LoadedDataset<T>> {
    let entries = data::read_manifest(manifest)?;
    let root = data::manifest_root(manifest);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for e in &entries {
        let image = data::load_entry_image(
            &root,
            e,
            cfg.encoder.image_height,
            cfg.encoder.image_width,
        )?;
        let labels = match &e.tags {
            Some(tags) => labels_from_tags(
                tags,
                vocab,
                crate::text::TAG_SCORE_THRESHOLD,
                crate::text::TAG_LIMIT,
            )?,
            None => concept_labels(&e.captions, vocab, mode)?,
        };
        let record = ImageRecord {
            name: e.image.clone(),
            image,
            captions: e.captions.clone(),
            labels,
        };
        match e.split {
            Split::Train => train.push(record),
            Split::Val => val.push(record),
        }
    }
    if train.is_empty() {
        return Err(Error::data(format!(
            "{}: no training entries",
            manifest.display()
        )));
    }
    Ok(LoadedDataset { train, val })
}

/// One training item: an image paired with a single encoded caption.
#[derive(Debug, Clone)]
pub struct TrainExample<T> {
    pub name: String,
    pub image: Tensor<T>,
    /// Token ids ending in the separator, at most `max_caption_len` long.
    pub caption_ids: Vec<u32>,
    pub labels: ConceptLabelSet,
}

/// Expands image records into per-caption training items. Captions longer
/// than the decoder window are truncated before the separator goes on.
pub fn training_examples<T: Scalar>(
    records: &[ImageRecord<T>],
    vocab: &Vocab,
    max_caption_len: usize,
) -> Result<Vec<TrainExample<T>>> {
    if max_caption_len < 2 {
        return Err(Error::config(
            "max_caption_len must fit a token and the separator".to_string(),
        ));
    }
    let mut out = Vec::new();
    for r in records {
        for caption in &r.captions {
            let mut ids = vocab.encode(caption);
            if ids.is_empty() {
                return Err(Error::data(format!(
                    "{}: caption {caption:?} has no tokens",
                    r.name
                )));
            }
            ids.truncate(max_caption_len - 1);
            ids.push(Vocab::SEP);
            out.push(TrainExample {
                name: r.name.clone(),
                image: r.image.clone(),
                caption_ids: ids,
                labels: r.labels.clone(),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Shared loop machinery

/// Stable per-item RNG seed: depends only on the run seed, the step, and
/// the slot in the batch, never on worker scheduling.
fn item_seed(seed: u64, step: u64, slot: u64) -> u64 {
    let mut z = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ slot.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Resolves the worker count: an explicit setting wins, then the
/// `VITCAP_THREADS` environment variable, then the pool default (zero).
pub fn effective_threads(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::env::var("VITCAP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0)
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(effective_threads(threads))
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))
}

/// Averages per-item gradient lists into the parameter set, accumulating
/// in item order so the result does not depend on the worker count.
fn reduce_grads<T: Scalar>(
    set: &mut ParamSet<T>,
    per_item: Vec<Vec<(usize, Vec<T>)>>,
) -> Result<()> {
    let batch = per_item.len();
    if batch == 0 {
        return Err(Error::config("empty batch".to_string()));
    }
    set.clear_grads();
    let mut acc: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    for grads in per_item {
        for (idx, g) in grads {
            match acc.get_mut(&idx) {
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&g) {
                        *x = *x + *y;
                    }
                }
                None => {
                    acc.insert(idx, g);
                }
            }
        }
    }
    let inv = T::from_f64(1.0 / batch as f64);
    for (idx, mut g) in acc {
        for v in &mut g {
            *v = *v * inv;
        }
        set.get_at_mut(idx).tensor.grad = Some(g);
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    // Slot sentinel keeps shuffle seeds disjoint from per-item seeds.
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, epoch as u64, u64::MAX));
    order.shuffle(&mut rng);
    order
}

fn planned_steps(n: usize, cfg: &TrainConfig) -> usize {
    let per_epoch = n.div_ceil(cfg.batch_size);
    let by_epochs = per_epoch * cfg.epochs;
    if cfg.max_steps == 0 {
        by_epochs
    } else if cfg.epochs == 0 {
        cfg.max_steps
    } else {
        by_epochs.min(cfg.max_steps)
    }
}

// ---------------------------------------------------------------------
// Stage one

fn stage1_item<T: Scalar>(
    set: &ParamSet<T>,
    cfg: &ModelConfig,
    ex: &TrainExample<T>,
    augment: bool,
    mut rng: ChaCha8Rng,
) -> Result<(f64, Vec<(usize, Vec<T>)>)> {
    let image = if augment {
        data::augment(&ex.image, &mut rng)?
    } else {
        ex.image.clone()
    };
    let patches = encoder::patchify(&image, cfg.encoder.patch_size)?;
    let mut tape = Tape::new();
    let enc = encoder::encode(&mut tape, set, &cfg.encoder, &patches, true, false)?;
    let vars = ctn::predict(&mut tape, set, &cfg.ctn, cfg.encoder.dim, enc.mid)?;
    let loss = ctn::concept_loss(&mut tape, vars.probs, &ex.labels, &cfg.ctn)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0].to_f64();
    Ok((value, tape.into_param_grads()))
}

/// Concept pretraining: focal loss only, every group at the same rate,
/// learning rate decaying linearly to zero across the planned steps.
pub fn train_stage1<T: Scalar>(
    set: &mut ParamSet<T>,
    model_cfg: &ModelConfig,
    examples: &[TrainExample<T>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    model_cfg.validate()?;
    cfg.validate()?;
    if cfg.stage != Stage::Concepts {
        return Err(Error::config(
            "concept pretraining needs a config with stage \"concepts\"".to_string(),
        ));
    }
    if examples.is_empty() {
        return Err(Error::data("no training examples".to_string()));
    }
    let pool = build_pool(cfg.threads)?;
    let mut opt = AdamW::new(cfg.optimizer)?;
    let total = planned_steps(examples.len(), cfg);
    let mut reports = Vec::with_capacity(total);
    let mut step = 0u64;
    'epochs: for epoch in 0.. {
        if cfg.epochs > 0 && epoch >= cfg.epochs && cfg.max_steps == 0 {
            break;
        }
        let order = epoch_order(examples.len(), cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            if step as usize >= total {
                break 'epochs;
            }
            let results: Vec<Result<(f64, Vec<(usize, Vec<T>)>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &i)| {
                        let rng =
                            ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, step, slot as u64));
                        stage1_item(set, model_cfg, &examples[i], cfg.augment, rng)
                    })
                    .collect()
            });
            let mut losses = Vec::with_capacity(results.len());
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) = r?;
                losses.push(l);
                grads.push(g);
            }
            let l_vc = losses.iter().sum::<f64>() / losses.len() as f64;
            // Linear decay; stays strictly positive for every planned step.
            let lrs = GroupLrs::uniform(cfg.base_lr * (1.0 - step as f64 / total as f64));
            reduce_grads(set, grads)?;
            opt.step(set, &lrs)?;
            step += 1;
            let report = LossReport::new(step, l_vc, 0.0, 0.0, lrs);
            on_step(&report);
            reports.push(report);
        }
        if step as usize >= total {
            break;
        }
    }
    Ok(reports)
}

// ---------------------------------------------------------------------
// Stage two

/// A frozen model used as a distillation teacher. Runs its own full
/// pipeline (encoder, concept selection, decoder) on every item.
pub struct TeacherHandle<T> {
    set: ParamSet<T>,
    cfg: ModelConfig,
    vocab_hash: String,
}

impl<T: Scalar> TeacherHandle<T> {
    pub fn new(set: ParamSet<T>, cfg: ModelConfig, vocab_hash: String) -> Result<TeacherHandle<T>> {
        cfg.validate()?;
        Ok(TeacherHandle {
            set,
            cfg,
            vocab_hash,
        })
    }

    /// Hash of the vocabulary the teacher was trained with; callers must
    /// refuse a teacher whose hash differs from the student's.
    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.set
    }

    /// Teacher logits for the same corrupted caption the student sees.
    fn logits_for(&self, image: &Tensor<T>, corrupted: &[u32]) -> Result<Tensor<T>> {
        let analysis = model::analyze_image(&self.set, &self.cfg, image)?;
        let concept_ids: Vec<u32> = analysis.concepts.top.iter().map(|(id, _)| *id).collect();
        let mut tape = Tape::new();
        let visual = tape.constant(analysis.encoder.last);
        let out = decoder::decode_forward(
            &mut tape,
            &self.set,
            &self.cfg.decoder,
            self.cfg.encoder.dim,
            &concept_ids,
            visual,
            corrupted,
        )?;
        Ok(tape.value(out.logits).clone())
    }
}

fn concept_ids_for<T: Scalar>(
    source: ConceptSource,
    probs: &[T],
    labels: &ConceptLabelSet,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    match source {
        ConceptSource::Predicted => Ok(ctn::top_k_concepts(
            probs,
            cfg.ctn.top_k,
            cfg.ctn.excluded_specials,
        )?
        .into_iter()
        .map(|(id, _)| id)
        .collect()),
        ConceptSource::GroundTruth => Ok(labels
            .ids()
            .iter()
            .copied()
            .take(cfg.ctn.top_k)
            .collect()),
        ConceptSource::Mixed { p } => {
            // One draw per item, consumed even at p = 0 or 1 so that the
            // downstream corruption stream does not depend on p.
            let use_truth = rng.gen::<f64>() < p;
            let fixed = if use_truth {
                ConceptSource::GroundTruth
            } else {
                ConceptSource::Predicted
            };
            concept_ids_for(fixed, probs, labels, cfg, rng)
        }
        ConceptSource::NoConcepts => Ok(Vec::new()),
    }
}

struct Stage2Losses {
    l_vc: f64,
    l_cap: f64,
    l_dis: f64,
}

fn stage2_item<T: Scalar>(
    set: &ParamSet<T>,
    cfg: &ModelConfig,
    ex: &TrainExample<T>,
    train_cfg: &TrainConfig,
    teacher: Option<&TeacherHandle<T>>,
    mut rng: ChaCha8Rng,
) -> Result<(Stage2Losses, Vec<(usize, Vec<T>)>)> {
    let image = if train_cfg.augment {
        data::augment(&ex.image, &mut rng)?
    } else {
        ex.image.clone()
    };
    let patches = encoder::patchify(&image, cfg.encoder.patch_size)?;
    let mut tape = Tape::new();
    let enc = encoder::encode(&mut tape, set, &cfg.encoder, &patches, false, false)?;
    let ctn_vars = ctn::predict(&mut tape, set, &cfg.ctn, cfg.encoder.dim, enc.mid)?;
    let l_vc = ctn::concept_loss(&mut tape, ctn_vars.probs, &ex.labels, &cfg.ctn)?;

    let concept_ids = concept_ids_for(
        train_cfg.concept_source,
        tape.value(ctn_vars.probs).data(),
        &ex.labels,
        cfg,
        &mut rng,
    )?;
    let outcome = decoder::mlm_corrupt(&ex.caption_ids, train_cfg.mask_prob, &mut rng)?;
    let dec = decoder::decode_forward(
        &mut tape,
        set,
        &cfg.decoder,
        cfg.encoder.dim,
        &concept_ids,
        enc.last,
        &outcome.corrupted,
    )?;
    let l_cap = decoder::caption_loss(&mut tape, dec.logits, &ex.caption_ids, &outcome.masked)?;
    let mut total = tape.add(l_vc, l_cap)?;
    let mut dis_value = 0.0;
    if let Some(t) = teacher {
        let teacher_logits = t.logits_for(&image, &outcome.corrupted)?;
        let l_dis = decoder::kd_loss(&mut tape, dec.logits, &teacher_logits, &outcome.masked)?;
        total = tape.add(total, l_dis)?;
        dis_value = tape.value(l_dis).data()[0].to_f64();
    }
    tape.backward(total)?;
    let losses = Stage2Losses {
        l_vc: tape.value(l_vc).data()[0].to_f64(),
        l_cap: tape.value(l_cap).data()[0].to_f64(),
        l_dis: dis_value,
    };
    Ok((losses, tape.into_param_grads()))
}

/// Joint training: concept loss plus masked caption loss plus optional
/// distillation, at a constant learning rate with the pretrained groups
/// (stem and concept blocks) slowed by `alpha`.
pub fn train_stage2<T: Scalar>(
    set: &mut ParamSet<T>,
    model_cfg: &ModelConfig,
    examples: &[TrainExample<T>],
    cfg: &TrainConfig,
    teacher: Option<&TeacherHandle<T>>,
    mut on_step: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    model_cfg.validate()?;
    cfg.validate()?;
    if cfg.stage != Stage::Joint {
        return Err(Error::config(
            "joint training needs a config with stage \"joint\"".to_string(),
        ));
    }
    if examples.is_empty() {
        return Err(Error::data("no training examples".to_string()));
    }
    if let Some(t) = teacher {
        if t.cfg.vocab_size != model_cfg.vocab_size {
            return Err(Error::config(format!(
                "teacher vocabulary ({}) does not match the student's ({})",
                t.cfg.vocab_size, model_cfg.vocab_size
            )));
        }
    }
    for ex in examples {
        if ex.caption_ids.len() > model_cfg.decoder.max_caption_len {
            return Err(Error::data(format!(
                "{}: caption of {} tokens exceeds the decoder window",
                ex.name,
                ex.caption_ids.len()
            )));
        }
    }
    let pool = build_pool(cfg.threads)?;
    let mut opt = AdamW::new(cfg.optimizer)?;
    let lrs = GroupLrs::staged(cfg.base_lr, cfg.alpha);
    let total = planned_steps(examples.len(), cfg);
    let mut reports = Vec::with_capacity(total);
    let mut step = 0u64;
    'epochs: for epoch in 0.. {
        if cfg.epochs > 0 && epoch >= cfg.epochs && cfg.max_steps == 0 {
            break;
        }
        let order = epoch_order(examples.len(), cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            if step as usize >= total {
                break 'epochs;
            }
            let results: Vec<Result<(Stage2Losses, Vec<(usize, Vec<T>)>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &i)| {
                        let rng =
                            ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, step, slot as u64));
                        stage2_item(set, model_cfg, &examples[i], cfg, teacher, rng)
                    })
                    .collect()
            });
            let mut losses = Vec::with_capacity(results.len());
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) = r?;
                losses.push(l);
                grads.push(g);
            }
            let n = losses.len() as f64;
            let l_vc = losses.iter().map(|l| l.l_vc).sum::<f64>() / n;
            let l_cap = losses.iter().map(|l| l.l_cap).sum::<f64>() / n;
            let l_dis = losses.iter().map(|l| l.l_dis).sum::<f64>() / n;
            reduce_grads(set, grads)?;
            opt.step(set, &lrs)?;
            step += 1;
            let report = LossReport::new(step, l_vc, l_cap, l_dis, lrs);
            on_step(&report);
            reports.push(report);
        }
        if step as usize >= total {
            break;
        }
    }
    Ok(reports)
}

// ---------------------------------------------------------------------
// Evaluation

/// One evaluated image.
#[derive(Debug, Clone, Serialize)]
pub struct EvalItem {
    pub name: String,
    pub caption: String,
    pub references: Vec<String>,
    /// Predicted concepts as `(token, score)`, highest first.
    pub concepts: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub bleu4: f64,
    pub consensus: f64,
    pub concept_recall: f64,
    pub items: Vec<EvalItem>,
}

/// Captions every record and scores the corpus: BLEU-4, the TF-IDF
/// consensus metric, and recall of the ground-truth concepts among the
/// predicted top scores.
pub fn evaluate_model<T: Scalar>(
    set: &ParamSet<T>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    records: &[ImageRecord<T>],
    strategy: DecodeStrategy,
) -> Result<EvalOutcome> {
    if records.is_empty() {
        return Err(Error::data("nothing to evaluate".to_string()));
    }
    let mut items = Vec::with_capacity(records.len());
    let mut corpus = Vec::with_capacity(records.len());
    let mut predicted = Vec::with_capacity(records.len());
    let mut truths = Vec::with_capacity(records.len());
    for r in records {
        let (out, concepts) = model::caption_image(set, cfg, &r.image, strategy)?;
        let caption = vocab.decode(&out.ids)?;
        let mut named = Vec::with_capacity(concepts.top.len());
        for &(id, score) in &concepts.top {
            named.push((vocab.token(id)?.to_string(), score.to_f64()));
        }
        corpus.push((caption.clone(), r.captions.clone()));
        predicted.push(concepts.top.iter().map(|(id, _)| *id).collect::<Vec<u32>>());
        truths.push(r.labels.clone());
        items.push(EvalItem {
            name: r.name.clone(),
            caption,
            references: r.captions.clone(),
            concepts: named,
        });
    }
    let bleu = metrics::bleu_corpus(&corpus)?;
    let consensus = metrics::consensus_mean(&corpus)?;
    let concept_recall = metrics::concept_recall(&predicted, &truths)?;
    Ok(EvalOutcome {
        bleu4: bleu.score,
        consensus,
        concept_recall,
        items,
    })
}
