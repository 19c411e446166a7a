//! Concept head: a short transformer stack over the encoder's split
//! activation, a two-layer classifier on its first row, and an asymmetric
//! focal loss over sigmoid probabilities.
//!
//! For probability `p` and focusing exponents `(gp, gn)`, the per-vocab
//! terms are `(1-p)^gp * ln p` for positives and `p^gn * ln(1-p)` for
//! negatives; the loss is minus their sum divided by the normalizer. With
//! `gp = 0` positives reduce to plain log-likelihood while `gn = 1`
//! down-weights easy negatives.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{block_forward, init_block, BlockDims, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamSet};
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};
use crate::text::{ConceptLabelSet, Vocab};

/// What the focal normalizer divides by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeBy {
    /// Vocabulary size (the written-out form of the loss).
    Vocab,
    /// The number of injected concepts, making runs with different
    /// vocabularies comparable.
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtnConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the classifier MLP.
    pub head_hidden: usize,
    /// Concepts injected into the decoder.
    pub top_k: usize,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]` inside the loss.
    pub prob_clamp: f64,
    pub normalize_by: NormalizeBy,
    /// Leading vocabulary ids excluded from the loss and from top-k
    /// selection (the structural tokens). Zero exposes the raw formula.
    pub excluded_specials: usize,
}

impl Default for CtnConfig {
    fn default() -> Self {
        CtnConfig {
            depth: 1,
            heads: 4,
            mlp_ratio: 2,
            head_hidden: 64,
            top_k: 8,
            gamma_pos: 0.0,
            gamma_neg: 1.0,
            prob_clamp: 1e-7,
            normalize_by: NormalizeBy::Vocab,
            excluded_specials: Vocab::SPECIALS,
        }
    }
}

impl CtnConfig {
    pub fn validate(&self, dim: usize, vocab_size: usize) -> Result<()> {
        BlockDims {
            dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
        .validate()?;
        if self.depth == 0 || self.head_hidden == 0 {
            return Err(Error::config(
                "concept head needs depth >= 1 and a positive hidden width".to_string(),
            ));
        }
        if self.top_k == 0 || self.top_k + self.excluded_specials > vocab_size {
            return Err(Error::config(format!(
                "top_k {} with {} excluded ids does not fit vocabulary of {vocab_size}",
                self.top_k, self.excluded_specials
            )));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::config(format!(
                "prob_clamp must lie in (0, 0.5), got {}",
                self.prob_clamp
            )));
        }
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::config(
                "focusing exponents must be non-negative".to_string(),
            ));
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

    fn normalizer(&self, vocab_size: usize) -> f64 {
        match self.normalize_by {
            NormalizeBy::Vocab => vocab_size as f64,
            NormalizeBy::TopK => self.top_k as f64,
        }
    }
}

pub fn init_ctn_params<T: Scalar>(
    set: &mut ParamSet<T>,
    cfg: &CtnConfig,
    dim: usize,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate(dim, vocab_size)?;
    for i in 0..cfg.depth {
        init_block(
            set,
            &format!("ctn.block{i}"),
            cfg.block_dims(dim),
            ParamGroup::Ctn,
            rng,
        )?;
    }
    set.insert(
        "ctn.head.w1",
        ParamGroup::Heads,
        Tensor::randn(vec![dim, cfg.head_hidden], INIT_STD, rng),
    )?;
    set.insert(
        "ctn.head.b1",
        ParamGroup::Heads,
        Tensor::zeros(vec![cfg.head_hidden]),
    )?;
    set.insert(
        "ctn.head.w2",
        ParamGroup::Heads,
        Tensor::randn(vec![cfg.head_hidden, vocab_size], INIT_STD, rng),
    )?;
    set.insert(
        "ctn.head.b2",
        ParamGroup::Heads,
        Tensor::zeros(vec![vocab_size]),
    )?;
    Ok(())
}

pub struct CtnVars {
    /// `[1, vocab]` pre-sigmoid scores.
    pub logits: VarId,
    /// `[1, vocab]` sigmoid probabilities.
    pub probs: VarId,
}

/// Runs the concept blocks on the encoder's split activation and classifies
/// from the first (classification) row.
pub fn predict<T: Scalar>(
    tape: &mut Tape<T>,
    set: &ParamSet<T>,
    cfg: &CtnConfig,
    dim: usize,
    encoder_mid: VarId,
) -> Result<CtnVars> {
    let mut h = encoder_mid;
    for i in 0..cfg.depth {
        h = block_forward(
            tape,
            set,
            &format!("ctn.block{i}"),
            h,
            cfg.block_dims(dim),
            None,
            None,
        )?;
    }
    let seq = tape.shape(h)[0];
    let cls = tape.slice(h, 0, 1, 0, dim)?;
    debug_assert_eq!(seq, tape.shape(encoder_mid)[0]);
    let w1 = tape.param(set, "ctn.head.w1")?;
    let b1 = tape.param(set, "ctn.head.b1")?;
    let w2 = tape.param(set, "ctn.head.w2")?;
    let b2 = tape.param(set, "ctn.head.b2")?;
    let h1 = tape.linear(cls, w1, b1)?;
    let act = tape.gelu(h1)?;
    let logits = tape.linear(act, w2, b2)?;
    let probs = tape.sigmoid(logits)?;
    Ok(CtnVars { logits, probs })
}

/// Top-scoring concept ids, specials excluded, ties broken toward the
/// lower id. Scores come back alongside ids, highest first.
pub fn top_k_concepts<T: Scalar>(
    probs: &[T],
    k: usize,
    excluded_specials: usize,
) -> Result<Vec<(u32, T)>> {
    if k + excluded_specials > probs.len() {
        return Err(Error::config(format!(
            "cannot select {k} concepts from {} scores with {excluded_specials} excluded",
            probs.len()
        )));
    }
    let mut order: Vec<u32> = (excluded_specials as u32..probs.len() as u32).collect();
    order.sort_by(|&a, &b| {
        probs[b as usize]
            .partial_cmp(&probs[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(k)
        .map(|id| (id, probs[id as usize]))
        .collect())
}

/// Dense prediction output for one image.
#[derive(Debug, Clone)]
pub struct ConceptPrediction<T> {
    pub probs: Tensor<T>,
    /// `(id, score)` pairs, highest score first.
    pub top: Vec<(u32, T)>,
}

/// Builds the focal loss over the tape. `probs` is the `[1, vocab]` output
/// of [`predict`]; labels mark the positive vocabulary entries.
pub fn concept_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: VarId,
    labels: &ConceptLabelSet,
    cfg: &CtnConfig,
) -> Result<VarId> {
    let vocab = tape.value(probs).numel();
    if labels.vocab_size() != vocab {
        return Err(Error::shape(format!(
            "labels cover a vocabulary of {}, predictions one of {vocab}",
            labels.vocab_size()
        )));
    }
    let hot = labels.multi_hot();
    let mut pos_w = vec![T::zero(); vocab];
    let mut neg_w = vec![T::zero(); vocab];
    for id in 0..vocab {
        if id < cfg.excluded_specials {
            continue;
        }
        if hot[id] {
            pos_w[id] = T::one();
        } else {
            neg_w[id] = T::one();
        }
    }
    let shape = tape.shape(probs).to_vec();
    let pos_w = tape.constant(Tensor::new(shape.clone(), pos_w)?);
    let neg_w = tape.constant(Tensor::new(shape.clone(), neg_w)?);
    let one = tape.constant(Tensor::full(shape, T::one()));

    let p = tape.clamp(probs, cfg.prob_clamp, 1.0 - cfg.prob_clamp)?;
    let q = tape.sub(one, p)?;
    let log_p = tape.log(p)?;
    let log_q = tape.log(q)?;
    let pos_focus = tape.pow(q, cfg.gamma_pos)?;
    let neg_focus = tape.pow(p, cfg.gamma_neg)?;
    let pos_term = tape.mul(pos_focus, log_p)?;
    let pos_term = tape.mul(pos_term, pos_w)?;
    let neg_term = tape.mul(neg_focus, log_q)?;
    let neg_term = tape.mul(neg_term, neg_w)?;
    let total = tape.add(pos_term, neg_term)?;
    let summed = tape.sum(total)?;
    tape.scale(summed, -1.0 / cfg.normalizer(vocab))
}

/// Closed-form gradient of the focal loss w.r.t. the (clamped)
/// probabilities; the reference the tape is tested against.
pub fn focal_gradient<T: Scalar>(
    probs: &Tensor<T>,
    labels: &ConceptLabelSet,
    cfg: &CtnConfig,
) -> Result<Tensor<T>> {
    let vocab = probs.numel();
    if labels.vocab_size() != vocab {
        return Err(Error::shape(format!(
            "labels cover a vocabulary of {}, predictions one of {vocab}",
            labels.vocab_size()
        )));
    }
    let hot = labels.multi_hot();
    let inv_c = 1.0 / cfg.normalizer(vocab);
    let (lo, hi) = (cfg.prob_clamp, 1.0 - cfg.prob_clamp);
    let mut out = vec![T::zero(); vocab];
    for id in 0..vocab {
        if id < cfg.excluded_specials {
            continue;
        }
        let raw = probs.data()[id].to_f64();
        if raw <= lo || raw >= hi {
            continue;
        }
        let p = raw;
        let g = if hot[id] {
            // d/dp [(1-p)^gp * ln p] = -gp (1-p)^(gp-1) ln p + (1-p)^gp / p
            let gp = cfg.gamma_pos;
            let lead = if gp == 0.0 {
                0.0
            } else {
                -gp * (1.0 - p).powf(gp - 1.0) * p.ln()
            };
            lead + (1.0 - p).powf(gp) / p
        } else {
            // d/dp [p^gn * ln(1-p)] = gn p^(gn-1) ln(1-p) - p^gn / (1-p)
            let gn = cfg.gamma_neg;
            let lead = if gn == 0.0 {
                0.0
            } else {
                gn * p.powf(gn - 1.0) * (1.0 - p).ln()
            };
            lead - p.powf(gn) / (1.0 - p)
        };
        out[id] = T::from_f64(-inv_c * g);
    }
    Tensor::new(probs.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_cfg(vocab: usize) -> CtnConfig {
        CtnConfig {
            excluded_specials: 0,
            top_k: vocab.saturating_sub(1).max(1),
            ..CtnConfig::default()
        }
    }

    #[test]
    fn uniform_half_probs_give_closed_form_loss() {
        // vocab 4, labels {0, 1}, all p = 0.5, gp = 0, gn = 1:
        // positives contribute ln 0.5 each, negatives 0.5 ln 0.5 each,
        // so loss = -(2 + 1) ln 0.5 / 4 = 0.75 ln 2.
        let mut tape = Tape::new();
        let probs = tape.leaf(Tensor::new(vec![1, 4], vec![0.5f64; 4]).unwrap());
        let labels = ConceptLabelSet::new(4, vec![0, 1]).unwrap();
        let loss = concept_loss(&mut tape, probs, &labels, &raw_cfg(4)).unwrap();
        let expected = 0.75 * std::f64::consts::LN_2;
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn tape_gradient_matches_closed_form() {
        let data = vec![0.3f64, 0.8, 0.1, 0.6, 0.45];
        let probs_t = Tensor::new(vec![1, 5], data).unwrap();
        let labels = ConceptLabelSet::new(5, vec![1, 3]).unwrap();
        let cfg = raw_cfg(5);
        let mut tape = Tape::new();
        let probs = tape.leaf(probs_t.clone());
        let loss = concept_loss(&mut tape, probs, &labels, &cfg).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(probs).unwrap();
        let want = focal_gradient(&probs_t, &labels, &cfg).unwrap();
        for (a, b) in g.iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn excluded_specials_carry_no_loss_or_gradient() {
        let cfg = CtnConfig {
            excluded_specials: 2,
            top_k: 2,
            ..CtnConfig::default()
        };
        let mut tape = Tape::new();
        let probs = tape.leaf(Tensor::new(vec![1, 4], vec![0.9f64, 0.9, 0.5, 0.5]).unwrap());
        let labels = ConceptLabelSet::new(4, vec![2]).unwrap();
        let loss = concept_loss(&mut tape, probs, &labels, &cfg).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(probs).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!(g[2] != 0.0 && g[3] != 0.0);
    }

    #[test]
    fn top_k_skips_specials_and_breaks_ties_low() {
        let probs = vec![0.99f64, 0.98, 0.5, 0.7, 0.5, 0.2];
        let top = top_k_concepts(&probs, 3, 2).unwrap();
        let ids: Vec<u32> = top.iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, vec![3, 2, 4], "0.7 first, then the tied 0.5s by id");
    }

    #[test]
    fn config_validation_rejects_oversized_top_k() {
        let cfg = CtnConfig {
            top_k: 10,
            ..CtnConfig::default()
        };
        assert!(cfg.validate(32, 12).is_err());
    }
}
