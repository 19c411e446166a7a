//! Caption decoder over a fused sequence.
//!
//! The input is `[concepts | visual tokens | caption]`. Context positions
//! (concepts and visual) attend bidirectionally among themselves and never
//! see the caption; caption position `t` sees the whole context plus
//! caption positions up to `t`. Concepts and captions share one embedding
//! table, which is also the output projection.
//!
//! Training corrupts the caption with mask tokens and scores only the
//! corrupted positions; generation appends a mask token per step and reads
//! its distribution.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{block_forward, init_block, BlockDims, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamSet};
use crate::tape::{log_softmax_vec, BoolMask, Tape, VarId};
use crate::tensor::{Scalar, Tensor};
use crate::text::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Longest caption the decoder can attend over, terminator included.
    pub max_caption_len: usize,
    /// Per-position corruption probability during training.
    pub mask_prob: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            max_caption_len: 12,
            mask_prob: 0.15,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        BlockDims {
            dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
        .validate()?;
        if self.depth == 0 || self.max_caption_len == 0 {
            return Err(Error::config(
                "decoder needs depth >= 1 and max_caption_len >= 1".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_prob == 0.0 {
            return Err(Error::config(format!(
                "mask_prob must lie in (0, 1], got {}",
                self.mask_prob
            )));
        }
        Ok(())
    }

    fn block_dims(&self, dim: usize) -> BlockDims {
        BlockDims {
            dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

pub fn init_decoder_params<T: Scalar>(
    set: &mut ParamSet<T>,
    cfg: &DecoderConfig,
    dim: usize,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate(dim)?;
    set.insert(
        "decoder.embed",
        ParamGroup::Decoder,
        Tensor::randn(vec![vocab_size, dim], INIT_STD, rng),
    )?;
    set.insert(
        "decoder.pos",
        ParamGroup::Decoder,
        Tensor::randn(vec![cfg.max_caption_len, dim], INIT_STD, rng),
    )?;
    for seg in ["concept", "visual", "caption"] {
        set.insert(
            format!("decoder.seg.{seg}"),
            ParamGroup::Decoder,
            Tensor::randn(vec![dim], INIT_STD, rng),
        )?;
    }
    set.insert(
        "decoder.vproj.w",
        ParamGroup::Decoder,
        Tensor::randn(vec![dim, dim], INIT_STD, rng),
    )?;
    set.insert(
        "decoder.vproj.b",
        ParamGroup::Decoder,
        Tensor::zeros(vec![dim]),
    )?;
    for i in 0..cfg.depth {
        init_block(
            set,
            &format!("decoder.block{i}"),
            cfg.block_dims(dim),
            ParamGroup::Decoder,
            rng,
        )?;
    }
    set.insert(
        "decoder.ln_f.gamma",
        ParamGroup::Decoder,
        Tensor::full(vec![dim], T::one()),
    )?;
    set.insert(
        "decoder.ln_f.beta",
        ParamGroup::Decoder,
        Tensor::zeros(vec![dim]),
    )?;
    Ok(())
}

/// Fused-sequence attention pattern: bidirectional context block of
/// `context_len` rows, then `caption_len` rows where row `t` additionally
/// sees caption positions `0..=t`.
pub fn seq2seq_mask(context_len: usize, caption_len: usize) -> Result<BoolMask> {
    let n = context_len + caption_len;
    if n == 0 {
        return Err(Error::shape("mask over an empty sequence".to_string()));
    }
    let mut allow = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            allow[r * n + c] = if r < context_len {
                c < context_len
            } else {
                c < context_len || c <= r
            };
        }
    }
    BoolMask::new(n, n, allow)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmOutcome {
    pub corrupted: Vec<u32>,
    /// Positions replaced by the mask token, ascending.
    pub masked: Vec<usize>,
    /// True when nothing was drawn and one position was forced.
    pub forced: bool,
}

/// Independently masks each position with `mask_prob`; if nothing is drawn,
/// one uniformly chosen position is masked so every sample trains.
pub fn mlm_corrupt(ids: &[u32], mask_prob: f64, rng: &mut ChaCha8Rng) -> Result<MlmOutcome> {
    if ids.is_empty() {
        return Err(Error::config("cannot corrupt an empty caption".to_string()));
    }
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::config(format!(
            "mask_prob must lie in [0, 1], got {mask_prob}"
        )));
    }
    let mut corrupted = ids.to_vec();
    let mut masked = Vec::new();
    for (i, slot) in corrupted.iter_mut().enumerate() {
        if rng.gen::<f64>() < mask_prob {
            *slot = Vocab::MASK;
            masked.push(i);
        }
    }
    let forced = masked.is_empty();
    if forced {
        let i = rng.gen_range(0..ids.len());
        corrupted[i] = Vocab::MASK;
        masked.push(i);
    }
    Ok(MlmOutcome {
        corrupted,
        masked,
        forced,
    })
}

pub struct DecodeVars {
    /// `[caption_len, vocab]` scores for each caption position.
    pub logits: VarId,
    /// Final hidden state of the whole fused sequence, context rows first;
    /// lets tests and tools inspect the context segment.
    pub hidden: VarId,
    /// Rows of `hidden` in front of the caption segment.
    pub context_len: usize,
}

/// Runs the decoder. `visual` is the encoder's final activation already on
/// this tape; `concept_ids` may be empty (concept-free ablation).
pub fn decode_forward<T: Scalar>(
    tape: &mut Tape<T>,
    set: &ParamSet<T>,
    cfg: &DecoderConfig,
    dim: usize,
    concept_ids: &[u32],
    visual: VarId,
    caption_ids: &[u32],
) -> Result<DecodeVars> {
    if caption_ids.is_empty() {
        return Err(Error::shape("decoder needs at least one caption position".to_string()));
    }
    if caption_ids.len() > cfg.max_caption_len {
        return Err(Error::shape(format!(
            "caption of {} exceeds max_caption_len {}",
            caption_ids.len(),
            cfg.max_caption_len
        )));
    }
    let embed = tape.param(set, "decoder.embed")?;

    let mut parts = Vec::new();
    if !concept_ids.is_empty() {
        let ce = tape.embedding(embed, concept_ids)?;
        let seg = tape.param(set, "decoder.seg.concept")?;
        parts.push(tape.add(ce, seg)?);
    }
    let vw = tape.param(set, "decoder.vproj.w")?;
    let vb = tape.param(set, "decoder.vproj.b")?;
    let vproj = tape.linear(visual, vw, vb)?;
    let vseg = tape.param(set, "decoder.seg.visual")?;
    parts.push(tape.add(vproj, vseg)?);

    let t = caption_ids.len();
    let ce = tape.embedding(embed, caption_ids)?;
    let pos_all = tape.param(set, "decoder.pos")?;
    let pos = tape.slice(pos_all, 0, t, 0, dim)?;
    let with_pos = tape.add(ce, pos)?;
    let cseg = tape.param(set, "decoder.seg.caption")?;
    parts.push(tape.add(with_pos, cseg)?);

    let fused = tape.concat(0, &parts)?;
    let context_len = tape.shape(fused)[0] - t;
    let mask = Arc::new(seq2seq_mask(context_len, t)?);
    let mut h = fused;
    for i in 0..cfg.depth {
        h = block_forward(
            tape,
            set,
            &format!("decoder.block{i}"),
            h,
            cfg.block_dims(dim),
            Some(&mask),
            None,
        )?;
    }
    let cap = tape.slice(h, context_len, context_len + t, 0, dim)?;
    let gamma = tape.param(set, "decoder.ln_f.gamma")?;
    let beta = tape.param(set, "decoder.ln_f.beta")?;
    let normed = tape.layer_norm(cap, gamma, beta, crate::blocks::LAYER_NORM_EPS)?;
    let embed_t = tape.transpose(embed)?;
    let logits = tape.matmul(normed, embed_t)?;
    Ok(DecodeVars {
        logits,
        hidden: h,
        context_len,
    })
}

/// Mean negative log-likelihood of the original tokens at the masked
/// positions only.
pub fn caption_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: VarId,
    targets: &[u32],
    masked: &[usize],
) -> Result<VarId> {
    let (t, vocab) = tape.value(logits).rows_cols()?;
    if targets.len() != t {
        return Err(Error::shape(format!(
            "{} targets for {t} caption positions",
            targets.len()
        )));
    }
    if masked.is_empty() {
        return Err(Error::config("caption loss with no masked positions".to_string()));
    }
    let mut sel = vec![T::zero(); t * vocab];
    for &pos in masked {
        if pos >= t {
            return Err(Error::shape(format!("masked position {pos} out of range")));
        }
        let id = targets[pos] as usize;
        if id >= vocab {
            return Err(Error::shape(format!(
                "target id {id} out of vocabulary range"
            )));
        }
        sel[pos * vocab + id] = T::one();
    }
    let sel = tape.constant(Tensor::new(vec![t, vocab], sel)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, sel)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / masked.len() as f64)
}

/// Mean KL divergence from the teacher's next-token distribution to the
/// student's, over masked positions. The teacher side is a constant.
pub fn kd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_logits: VarId,
    teacher_logits: &Tensor<T>,
    masked: &[usize],
) -> Result<VarId> {
    let (t, vocab) = tape.value(student_logits).rows_cols()?;
    let (tt, tv) = teacher_logits.rows_cols()?;
    if tt != t || tv != vocab {
        return Err(Error::shape(format!(
            "teacher logits [{tt}, {tv}] do not match student [{t}, {vocab}]"
        )));
    }
    if masked.is_empty() {
        return Err(Error::config("distillation with no masked positions".to_string()));
    }
    let m = masked.len();
    let mut probs = vec![T::zero(); m * vocab];
    let mut select = vec![T::zero(); m * t];
    let mut entropy = T::zero();
    for (row, &pos) in masked.iter().enumerate() {
        if pos >= t {
            return Err(Error::shape(format!("masked position {pos} out of range")));
        }
        let lp = log_softmax_vec(&teacher_logits.data()[pos * vocab..(pos + 1) * vocab]);
        for (k, &l) in lp.iter().enumerate() {
            let p = l.exp();
            probs[row * vocab + k] = p;
            entropy = entropy + p * l;
        }
        select[row * t + pos] = T::one();
    }
    let probs = tape.constant(Tensor::new(vec![m, vocab], probs)?);
    let select = tape.constant(Tensor::new(vec![m, t], select)?);
    let student_logp = tape.log_softmax(student_logits)?;
    let picked = tape.matmul(select, student_logp)?;
    let cross = tape.mul(probs, picked)?;
    let cross_sum = tape.sum(cross)?;
    // Both terms multiply by the same rounded reciprocal so a teacher that
    // equals the student cancels to exactly zero.
    let neg_cross = tape.scale(cross_sum, -(1.0 / m as f64))?;
    let ent = tape.constant_scalar((entropy * T::from_f64(1.0 / m as f64)).to_f64());
    tape.add(neg_cross, ent)
}

/// Ids never emitted by generation.
pub const GENERATION_BANNED: [u32; 3] = [Vocab::PAD, Vocab::CLS, Vocab::MASK];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize },
}

/// Scores the next position given the caption prefix. Implementations
/// append a mask token and return that position's logits.
pub trait StepScorer<T> {
    fn vocab_size(&self) -> usize;
    fn step(&mut self, prefix: &[u32]) -> Result<Vec<T>>;
}

#[derive(Debug, Clone)]
pub struct CaptionOutput<T> {
    /// Generated tokens, terminator excluded.
    pub ids: Vec<u32>,
    /// Log-probability of each emitted step, terminator included when one
    /// was produced.
    pub step_logprobs: Vec<T>,
    pub total_logprob: T,
}

struct Hypothesis<T> {
    ids: Vec<u32>,
    logprobs: Vec<T>,
    total: T,
    done: bool,
}

fn hyp_score<T: Scalar>(total: T, steps: usize, length_exponent: f64) -> T {
    if length_exponent == 0.0 || steps == 0 {
        total
    } else {
        total / T::from_f64(steps as f64).powf(T::from_f64(length_exponent))
    }
}

/// Generates a caption with the given strategy. `max_len` counts emitted
/// steps including the terminator; `length_exponent` 0 keeps pure summed
/// log-probability scoring.
pub fn generate<T: Scalar>(
    scorer: &mut dyn StepScorer<T>,
    strategy: DecodeStrategy,
    max_len: usize,
    length_exponent: f64,
) -> Result<CaptionOutput<T>> {
    if max_len == 0 {
        return Err(Error::config("max_len must be at least 1".to_string()));
    }
    let width = match strategy {
        DecodeStrategy::Greedy => 1,
        DecodeStrategy::Beam { width } => {
            if width == 0 {
                return Err(Error::config("beam width must be at least 1".to_string()));
            }
            width
        }
    };
    let vocab = scorer.vocab_size();
    let banned = |id: u32| GENERATION_BANNED.contains(&id);

    let mut hyps = vec![Hypothesis {
        ids: Vec::new(),
        logprobs: Vec::new(),
        total: T::zero(),
        done: false,
    }];
    for _ in 0..max_len {
        if hyps.iter().all(|h| h.done) {
            break;
        }
        // Candidates: finished hypotheses carry over unchanged; each live
        // one expands over the allowed vocabulary.
        let mut candidates: Vec<(usize, Option<u32>, T, T)> = Vec::new();
        for (hi, h) in hyps.iter().enumerate() {
            if h.done {
                let score = hyp_score(h.total, h.logprobs.len(), length_exponent);
                candidates.push((hi, None, T::zero(), score));
            }
        }
        for hi in 0..hyps.len() {
            if hyps[hi].done {
                continue;
            }
            let logits = scorer.step(&hyps[hi].ids)?;
            if logits.len() != vocab {
                return Err(Error::shape(format!(
                    "scorer returned {} logits for a vocabulary of {vocab}",
                    logits.len()
                )));
            }
            let logp = log_softmax_vec(&logits);
            for (id, &lp) in logp.iter().enumerate() {
                let id = id as u32;
                if banned(id) {
                    continue;
                }
                let total = hyps[hi].total + lp;
                let score = hyp_score(total, hyps[hi].logprobs.len() + 1, length_exponent);
                candidates.push((hi, Some(id), lp, score));
            }
        }
        // Deterministic order: score descending, then parent, then token.
        candidates.sort_by(|a, b| {
            b.3.partial_cmp(&a.3)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
                .then_with(|| a.1.unwrap_or(0).cmp(&b.1.unwrap_or(0)))
        });
        candidates.truncate(width);
        let mut next = Vec::with_capacity(candidates.len());
        for (hi, tok, lp, _) in candidates {
            let src = &hyps[hi];
            match tok {
                None => next.push(Hypothesis {
                    ids: src.ids.clone(),
                    logprobs: src.logprobs.clone(),
                    total: src.total,
                    done: true,
                }),
                Some(id) => {
                    let mut ids = src.ids.clone();
                    let mut logprobs = src.logprobs.clone();
                    logprobs.push(lp);
                    let done = id == Vocab::SEP;
                    if !done {
                        ids.push(id);
                    }
                    next.push(Hypothesis {
                        ids,
                        logprobs,
                        total: src.total + lp,
                        done,
                    });
                }
            }
        }
        hyps = next;
    }
    // Ties keep the earlier hypothesis, which the candidate sort already
    // ordered deterministically.
    let mut best = 0;
    for i in 1..hyps.len() {
        let si = hyp_score(hyps[i].total, hyps[i].logprobs.len(), length_exponent);
        let sb = hyp_score(hyps[best].total, hyps[best].logprobs.len(), length_exponent);
        if si > sb {
            best = i;
        }
    }
    let best = hyps.swap_remove(best);
    Ok(CaptionOutput {
        ids: best.ids,
        step_logprobs: best.logprobs,
        total_logprob: best.total,
    })
}
