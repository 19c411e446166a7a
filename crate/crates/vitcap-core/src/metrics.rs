//! Caption quality metrics: BLEU-4, a consensus TF-IDF metric over n-grams
//! (n = 1..4, cosine per n, averaged and scaled by 10), and concept
//! recall.
//!
//! All metrics tokenize with the crate tokenizer so scores cannot drift
//! from the training pipeline. BLEU uses clipped precision counts, the
//! closest-reference length for brevity (ties to the shorter), and no
//! smoothing: a hypothesis with zero matches at any order scores zero.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::text::{tokenize, ConceptLabelSet};

pub const MAX_NGRAM: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Per-order matched/total counts plus lengths; enough to aggregate BLEU
/// over a corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BleuCounts {
    pub matched: [usize; MAX_NGRAM],
    pub total: [usize; MAX_NGRAM],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuCounts {
    pub fn add(&mut self, other: &BleuCounts) {
        for n in 0..MAX_NGRAM {
            self.matched[n] += other.matched[n];
            self.total[n] += other.total[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Clipped n-gram counts of one hypothesis against its references. The
/// reference length is the one closest to the hypothesis length, ties
/// going to the shorter.
pub fn bleu_counts(hypothesis: &str, references: &[String]) -> Result<BleuCounts> {
    if references.is_empty() {
        return Err(Error::config("BLEU needs at least one reference".to_string()));
    }
    let hyp = tokenize(hypothesis);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let mut counts = BleuCounts {
        hyp_len: hyp.len(),
        ..BleuCounts::default()
    };
    let mut best: Option<usize> = None;
    for r in &refs {
        let better = match best {
            None => true,
            Some(b) => {
                let (db, dr) = (
                    (b as i64 - hyp.len() as i64).abs(),
                    (r.len() as i64 - hyp.len() as i64).abs(),
                );
                dr < db || (dr == db && r.len() < b)
            }
        };
        if better {
            best = Some(r.len());
        }
    }
    counts.ref_len = best.unwrap_or(0);
    for n in 1..=MAX_NGRAM {
        let hc = ngram_counts(&hyp, n);
        let mut total = 0usize;
        let mut matched = 0usize;
        for (gram, &count) in &hc {
            total += count;
            let max_ref = refs
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matched += count.min(max_ref);
        }
        counts.total[n - 1] = total;
        counts.matched[n - 1] = matched;
    }
    Ok(counts)
}

/// Turns (possibly aggregated) counts into a score.
pub fn bleu_from_counts(counts: &BleuCounts) -> BleuReport {
    let mut precisions = [0.0; MAX_NGRAM];
    for n in 0..MAX_NGRAM {
        if counts.total[n] > 0 {
            precisions[n] = counts.matched[n] as f64 / counts.total[n] as f64;
        }
    }
    let bp = if counts.hyp_len == 0 {
        0.0
    } else if counts.hyp_len < counts.ref_len {
        (1.0 - counts.ref_len as f64 / counts.hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_NGRAM as f64;
        bp * log_mean.exp()
    };
    BleuReport {
        score,
        precisions,
        brevity_penalty: bp,
        hyp_len: counts.hyp_len,
        ref_len: counts.ref_len,
    }
}

pub fn bleu_sentence(hypothesis: &str, references: &[String]) -> Result<BleuReport> {
    Ok(bleu_from_counts(&bleu_counts(hypothesis, references)?))
}

/// Corpus BLEU: counts are pooled over items before the ratio is taken.
pub fn bleu_corpus(items: &[(String, Vec<String>)]) -> Result<BleuReport> {
    if items.is_empty() {
        return Err(Error::config("corpus BLEU over no items".to_string()));
    }
    let mut pooled = BleuCounts::default();
    for (hyp, refs) in items {
        pooled.add(&bleu_counts(hyp, refs)?);
    }
    Ok(bleu_from_counts(&pooled))
}

type Gram = Vec<String>;

fn owned_ngrams(tokens: &[String], n: usize) -> HashMap<Gram, usize> {
    let mut out: HashMap<Gram, usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Consensus metric: per n-gram order, cosine similarity between TF-IDF
/// vectors of the hypothesis and each reference, averaged over references,
/// then over orders, scaled by 10. Document frequency counts images whose
/// reference set contains the n-gram; idf = ln(images / max(1, df)).
pub fn consensus_score(items: &[(String, Vec<String>)]) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::config("consensus score over no items".to_string()));
    }
    for (_, refs) in items {
        if refs.is_empty() {
            return Err(Error::config(
                "every item needs at least one reference".to_string(),
            ));
        }
    }
    let n_images = items.len() as f64;
    // df[n][gram] = number of images with the gram in any reference.
    let mut df: Vec<HashMap<Gram, usize>> = vec![HashMap::new(); MAX_NGRAM];
    for (_, refs) in items {
        for n in 1..=MAX_NGRAM {
            let mut present: HashMap<Gram, bool> = HashMap::new();
            for r in refs {
                for gram in owned_ngrams(&tokenize(r), n).into_keys() {
                    present.insert(gram, true);
                }
            }
            for gram in present.into_keys() {
                *df[n - 1].entry(gram).or_insert(0) += 1;
            }
        }
    }
    let idf = |n: usize, gram: &Gram| -> f64 {
        let d = df[n - 1].get(gram).copied().unwrap_or(0);
        (n_images / (d.max(1) as f64)).ln()
    };

    let mut scores = Vec::with_capacity(items.len());
    for (hyp, refs) in items {
        let hyp_toks = tokenize(hyp);
        let mut per_n = [0.0; MAX_NGRAM];
        for n in 1..=MAX_NGRAM {
            let hvec: HashMap<Gram, f64> = owned_ngrams(&hyp_toks, n)
                .into_iter()
                .map(|(g, c)| {
                    let w = c as f64 * idf(n, &g);
                    (g, w)
                })
                .collect();
            let hnorm: f64 = hvec.values().map(|w| w * w).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for r in refs {
                let rvec: HashMap<Gram, f64> = owned_ngrams(&tokenize(r), n)
                    .into_iter()
                    .map(|(g, c)| {
                        let w = c as f64 * idf(n, &g);
                        (g, w)
                    })
                    .collect();
                let rnorm: f64 = rvec.values().map(|w| w * w).sum::<f64>().sqrt();
                if hnorm > 0.0 && rnorm > 0.0 {
                    let dot: f64 = hvec
                        .iter()
                        .filter_map(|(g, w)| rvec.get(g).map(|rw| w * rw))
                        .sum();
                    acc += dot / (hnorm * rnorm);
                }
            }
            per_n[n - 1] = acc / refs.len() as f64;
        }
        scores.push(10.0 * per_n.iter().sum::<f64>() / MAX_NGRAM as f64);
    }
    Ok(scores)
}

pub fn consensus_mean(items: &[(String, Vec<String>)]) -> Result<f64> {
    let scores = consensus_score(items)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Fraction of ground-truth concepts recovered in the top-k prediction,
/// averaged over samples. Samples with empty ground truth are skipped; if
/// every sample is skipped that is an error, not a perfect score.
pub fn concept_recall(predictions: &[Vec<u32>], truths: &[ConceptLabelSet]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::config(format!(
            "{} predictions against {} truth sets",
            predictions.len(),
            truths.len()
        )));
    }
    let mut used = 0usize;
    let mut acc = 0.0;
    for (pred, truth) in predictions.iter().zip(truths) {
        if truth.is_empty() {
            continue;
        }
        used += 1;
        let hit = truth.ids().iter().filter(|id| pred.contains(id)).count();
        acc += hit as f64 / truth.len() as f64;
    }
    if used == 0 {
        return Err(Error::config(
            "concept recall undefined: every sample had empty ground truth".to_string(),
        ));
    }
    Ok(acc / used as f64)
}
