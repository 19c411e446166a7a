//! Whole-model configuration, initialization, and inference entry points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::block_param_names;
use crate::ctn::{self, ConceptPrediction, CtnConfig};
use crate::decoder::{self, CaptionOutput, DecodeStrategy, DecoderConfig, StepScorer};
use crate::encoder::{self, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::text::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ctn: CtnConfig,
    pub decoder: DecoderConfig,
    /// Zero means "fill in from the vocabulary file before validating".
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            ctn: CtnConfig::default(),
            decoder: DecoderConfig::default(),
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size <= Vocab::SPECIALS {
            return Err(Error::config(format!(
                "vocab_size must exceed the {} special tokens, got {}",
                Vocab::SPECIALS,
                self.vocab_size
            )));
        }
        self.ctn.validate(self.encoder.dim, self.vocab_size)?;
        self.decoder.validate(self.encoder.dim)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn sha256_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The feature blocks can be seeded from the concept blocks only when
    /// both stacks have the same length (and they share the encoder width
    /// by construction).
    pub fn feature_copy_applicable(&self) -> bool {
        self.encoder.depth - self.encoder.split_depth == self.ctn.depth
    }
}

/// Initializes every parameter of the model. The draw order is fixed:
/// encoder, concept head, decoder.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    encoder::init_encoder_params(&mut set, &cfg.encoder, &mut rng)?;
    ctn::init_ctn_params(&mut set, &cfg.ctn, cfg.encoder.dim, cfg.vocab_size, &mut rng)?;
    decoder::init_decoder_params(
        &mut set,
        &cfg.decoder,
        cfg.encoder.dim,
        cfg.vocab_size,
        &mut rng,
    )?;
    Ok(set)
}

/// Copies the trained concept-block weights onto the encoder blocks above
/// the split, pairing them in order. Returns the number of tensors copied.
pub fn copy_ctn_blocks_into_feature<T: Scalar>(
    set: &mut ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<usize> {
    if !cfg.feature_copy_applicable() {
        return Err(Error::config(format!(
            "feature copy needs matching stack lengths: {} feature blocks vs {} concept blocks",
            cfg.encoder.depth - cfg.encoder.split_depth,
            cfg.ctn.depth
        )));
    }
    let mut copied = 0;
    for i in 0..cfg.ctn.depth {
        let src_names = block_param_names(&format!("ctn.block{i}"));
        let dst_names = block_param_names(&format!("encoder.block{}", cfg.encoder.split_depth + i));
        for (src, dst) in src_names.iter().zip(&dst_names) {
            let values = set
                .get(src)
                .ok_or_else(|| Error::config(format!("missing parameter {src:?}")))?
                .tensor
                .data()
                .to_vec();
            set.copy_values(dst, &values)?;
            copied += 1;
        }
    }
    Ok(copied)
}

/// Encoder output plus concept prediction for one image.
pub struct ImageAnalysis<T> {
    pub encoder: EncoderOutput<T>,
    pub concepts: ConceptPrediction<T>,
}

/// Runs encoder and concept head on one `[H, W, 3]` image.
pub fn analyze_image<T: Scalar>(
    set: &ParamSet<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
) -> Result<ImageAnalysis<T>> {
    cfg.validate()?;
    let enc = encoder::encode_image(set, &cfg.encoder, image)?;
    let mut tape = Tape::new();
    let mid = tape.constant(enc.mid.clone());
    let vars = ctn::predict(&mut tape, set, &cfg.ctn, cfg.encoder.dim, mid)?;
    let probs = tape.value(vars.probs).clone();
    let top = ctn::top_k_concepts(probs.data(), cfg.ctn.top_k, cfg.ctn.excluded_specials)?;
    Ok(ImageAnalysis {
        encoder: enc,
        concepts: ConceptPrediction { probs, top },
    })
}

/// Step scorer backed by the full model: the image is encoded once, then
/// each step decodes `prefix + [MASK]` and returns the mask position's
/// logits.
pub struct ModelScorer<'a, T> {
    set: &'a ParamSet<T>,
    cfg: &'a ModelConfig,
    concept_ids: Vec<u32>,
    visual: Tensor<T>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(
        set: &'a ParamSet<T>,
        cfg: &'a ModelConfig,
        concept_ids: Vec<u32>,
        visual: Tensor<T>,
    ) -> ModelScorer<'a, T> {
        ModelScorer {
            set,
            cfg,
            concept_ids,
            visual,
        }
    }
}

impl<'a, T: Scalar> StepScorer<T> for ModelScorer<'a, T> {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn step(&mut self, prefix: &[u32]) -> Result<Vec<T>> {
        let mut caption: Vec<u32> = prefix.to_vec();
        caption.push(Vocab::MASK);
        let mut tape = Tape::new();
        let visual = tape.constant(self.visual.clone());
        let out = decoder::decode_forward(
            &mut tape,
            self.set,
            &self.cfg.decoder,
            self.cfg.encoder.dim,
            &self.concept_ids,
            visual,
            &caption,
        )?;
        let logits = tape.value(out.logits);
        let vocab = self.cfg.vocab_size;
        let last = caption.len() - 1;
        Ok(logits.data()[last * vocab..(last + 1) * vocab].to_vec())
    }
}

/// Full captioning pipeline for one image: encode, pick top concepts,
/// decode with the given strategy.
pub fn caption_image<T: Scalar>(
    set: &ParamSet<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    strategy: DecodeStrategy,
) -> Result<(CaptionOutput<T>, ConceptPrediction<T>)> {
    let analysis = analyze_image(set, cfg, image)?;
    let concept_ids: Vec<u32> = analysis.concepts.top.iter().map(|(id, _)| *id).collect();
    let mut scorer = ModelScorer::new(set, cfg, concept_ids, analysis.encoder.last.clone());
    let out = decoder::generate(
        &mut scorer,
        strategy,
        cfg.decoder.max_caption_len,
        0.0,
    )?;
    Ok((out, analysis.concepts))
}
