//! Grid ViT encoder.
//!
//! Images are cut into non-overlapping patches, linearly projected, prefixed
//! with a learned classification row, and given learned position embeddings.
//! The trunk is `depth` pre-norm blocks with no final normalization; the
//! activation after `split_depth` blocks feeds the concept head while the
//! final activation feeds the decoder. With `split_depth == depth` the two
//! are the same tensor.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{block_forward, init_block, BlockDims, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamSet};
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    /// Number of blocks below the split; the activation after this many
    /// blocks goes to the concept head.
    pub split_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_height: 32,
            image_width: 32,
            patch_size: 16,
            dim: 32,
            depth: 3,
            split_depth: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_height == 0
            || self.image_width == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return Err(Error::config(format!(
                "image {}x{} is not divisible into {}px patches",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.depth == 0 || self.split_depth == 0 || self.split_depth > self.depth {
            return Err(Error::config(format!(
                "need 1 <= split_depth <= depth, got split {} of {}",
                self.split_depth, self.depth
            )));
        }
        self.block_dims().validate()
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn patch_count(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Patch tokens plus the classification row.
    pub fn seq_len(&self) -> usize {
        self.patch_count() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// `[H, W, 3]` image to `[patches, patch_size^2 * 3]`, patches in row-major
/// grid order, pixels row-major inside each patch.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(format!(
            "expected an [H, W, 3] image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} is not divisible into {patch}px patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * 3;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * pd);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let row = pr * patch + r;
                let start = (row * w + pc * patch) * 3;
                out.extend_from_slice(&src[start..start + patch * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    patches: &Tensor<T>,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Tensor<T>> {
    let (n, pd) = patches.rows_cols()?;
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::shape(format!(
            "target {height}x{width} is not divisible into {patch}px patches"
        )));
    }
    let (gh, gw) = (height / patch, width / patch);
    if n != gh * gw || pd != patch * patch * 3 {
        return Err(Error::shape(format!(
            "patch tensor [{n}, {pd}] does not match a {height}x{width} image with {patch}px patches"
        )));
    }
    let src = patches.data();
    let mut out = vec![T::zero(); height * width * 3];
    for pr in 0..gh {
        for pc in 0..gw {
            let p = pr * gw + pc;
            for r in 0..patch {
                let row = pr * patch + r;
                let dst = (row * width + pc * patch) * 3;
                let s = p * pd + r * patch * 3;
                out[dst..dst + patch * 3].copy_from_slice(&src[s..s + patch * 3]);
            }
        }
    }
    Tensor::new(vec![height, width, 3], out)
}

pub fn init_encoder_params<T: Scalar>(
    set: &mut ParamSet<T>,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    set.insert(
        "encoder.patch.w",
        ParamGroup::Stem,
        Tensor::randn(vec![cfg.patch_dim(), cfg.dim], INIT_STD, rng),
    )?;
    set.insert(
        "encoder.patch.b",
        ParamGroup::Stem,
        Tensor::zeros(vec![cfg.dim]),
    )?;
    set.insert(
        "encoder.cls",
        ParamGroup::Stem,
        Tensor::randn(vec![1, cfg.dim], INIT_STD, rng),
    )?;
    set.insert(
        "encoder.pos",
        ParamGroup::Stem,
        Tensor::randn(vec![cfg.seq_len(), cfg.dim], INIT_STD, rng),
    )?;
    for i in 0..cfg.depth {
        let group = if i < cfg.split_depth {
            ParamGroup::Stem
        } else {
            ParamGroup::Feature
        };
        init_block(set, &format!("encoder.block{i}"), cfg.block_dims(), group, rng)?;
    }
    Ok(())
}

/// Tape handles produced by an encoder forward pass.
pub struct EncodeVars {
    /// Activation after `split_depth` blocks, `[seq, dim]`.
    pub mid: VarId,
    /// Activation after all blocks; equals `mid` when the trunk stops at
    /// the split.
    pub last: VarId,
    /// Post-softmax attention weights, one `[seq, seq]` entry per head,
    /// grouped per block. Empty unless capture was requested.
    pub attn: Vec<Vec<VarId>>,
}

/// Runs the encoder on pre-patchified pixels. `mid_only` stops the trunk at
/// the split (cheaper when only the concept head is trained);
/// `capture_attn` records attention weights per block.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    set: &ParamSet<T>,
    cfg: &EncoderConfig,
    patches: &Tensor<T>,
    mid_only: bool,
    capture_attn: bool,
) -> Result<EncodeVars> {
    let (n, pd) = patches.rows_cols()?;
    if n != cfg.patch_count() || pd != cfg.patch_dim() {
        return Err(Error::shape(format!(
            "patch tensor [{n}, {pd}] does not match encoder config ({} patches of {})",
            cfg.patch_count(),
            cfg.patch_dim()
        )));
    }
    let x = tape.constant(patches.clone());
    let pw = tape.param(set, "encoder.patch.w")?;
    let pb = tape.param(set, "encoder.patch.b")?;
    let proj = tape.linear(x, pw, pb)?;
    let cls = tape.param(set, "encoder.cls")?;
    let seq = tape.concat(0, &[cls, proj])?;
    let pos = tape.param(set, "encoder.pos")?;
    let mut h = tape.add(seq, pos)?;

    let upto = if mid_only { cfg.split_depth } else { cfg.depth };
    let mut attn = Vec::new();
    let mut mid = None;
    for i in 0..upto {
        let mut layer_maps = Vec::new();
        let capture = capture_attn.then_some(&mut layer_maps);
        h = block_forward(
            tape,
            set,
            &format!("encoder.block{i}"),
            h,
            cfg.block_dims(),
            None,
            capture,
        )?;
        if capture_attn {
            attn.push(layer_maps);
        }
        if i + 1 == cfg.split_depth {
            mid = Some(h);
        }
    }
    let mid = mid.expect("split_depth <= depth is validated");
    Ok(EncodeVars {
        mid,
        last: h,
        attn,
    })
}

/// Plain-tensor encoder output for inference-style callers.
pub struct EncoderOutput<T> {
    pub mid: Tensor<T>,
    pub last: Tensor<T>,
    /// Per block: `[heads, seq, seq]` post-softmax attention weights.
    pub attention: Vec<Tensor<T>>,
}

/// Encodes one image (given as `[H, W, 3]` pixels in `[0, 1]`) on a private
/// tape, returning dense outputs including per-block attention maps.
pub fn encode_image<T: Scalar>(
    set: &ParamSet<T>,
    cfg: &EncoderConfig,
    image: &Tensor<T>,
) -> Result<EncoderOutput<T>> {
    let patches = patchify(image, cfg.patch_size)?;
    let mut tape = Tape::new();
    let vars = encode(&mut tape, set, cfg, &patches, false, true)?;
    let seq = cfg.seq_len();
    let mut attention = Vec::with_capacity(vars.attn.len());
    for layer in &vars.attn {
        let mut data = Vec::with_capacity(layer.len() * seq * seq);
        for &head in layer {
            data.extend_from_slice(tape.value(head).data());
        }
        attention.push(Tensor::new(vec![layer.len(), seq, seq], data)?);
    }
    Ok(EncoderOutput {
        mid: tape.value(vars.mid).clone(),
        last: tape.value(vars.last).clone(),
        attention,
    })
}

/// Head-averaged attention map of one block, `[seq, seq]`.
pub fn head_mean_attention<T: Scalar>(per_head: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = per_head.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "expected [heads, seq, seq], got {shape:?}"
        )));
    }
    let (heads, rows, cols) = (shape[0], shape[1], shape[2]);
    if heads == 0 {
        return Err(Error::shape("attention tensor with zero heads".to_string()));
    }
    let src = per_head.data();
    let mut out = vec![T::zero(); rows * cols];
    for h in 0..heads {
        for i in 0..rows * cols {
            out[i] = out[i] + src[h * rows * cols + i];
        }
    }
    let inv = T::one() / T::from_f64(heads as f64);
    for v in out.iter_mut() {
        *v = *v * inv;
    }
    Tensor::new(vec![rows, cols], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            dim: 8,
            depth: 2,
            split_depth: 1,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let data: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![h, w, 3], data).unwrap()
    }

    #[test]
    fn patchify_unpatchify_round_trip() {
        let img = random_image(8, 12, 5);
        let patches = patchify(&img, 4).unwrap();
        assert_eq!(patches.shape(), &[6, 48]);
        let back = unpatchify(&patches, 8, 12, 4).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn patchify_layout_is_row_major_grid() {
        // 4x4 image, 2px patches: pixel (0, 2) starts patch 1.
        let mut data = vec![0.0f64; 4 * 4 * 3];
        data[(0 * 4 + 2) * 3] = 7.0;
        let img = Tensor::new(vec![4, 4, 3], data).unwrap();
        let patches = patchify(&img, 2).unwrap();
        assert_eq!(patches.at(1, 0), 7.0);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = random_image(8, 8, 0);
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn encode_shapes_and_split_capture() {
        let cfg = tiny_cfg();
        cfg.validate().unwrap();
        let mut set = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_encoder_params(&mut set, &cfg, &mut rng).unwrap();
        let img = random_image(8, 8, 1);
        let patches = patchify(&img, 4).unwrap();
        let mut tape = Tape::new();
        let vars = encode(&mut tape, &set, &cfg, &patches, false, true).unwrap();
        assert_eq!(tape.shape(vars.mid), &[5, 8]);
        assert_eq!(tape.shape(vars.last), &[5, 8]);
        assert_ne!(vars.mid, vars.last);
        assert_eq!(vars.attn.len(), 2);
        assert_eq!(vars.attn[0].len(), 2);
    }

    #[test]
    fn split_at_depth_makes_mid_and_last_identical() {
        let cfg = EncoderConfig {
            split_depth: 2,
            depth: 2,
            ..tiny_cfg()
        };
        let mut set = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_encoder_params(&mut set, &cfg, &mut rng).unwrap();
        let patches = patchify(&random_image(8, 8, 2), 4).unwrap();
        let mut tape = Tape::new();
        let vars = encode(&mut tape, &set, &cfg, &patches, false, false).unwrap();
        assert_eq!(vars.mid, vars.last);
        assert_eq!(tape.value(vars.mid).data(), tape.value(vars.last).data());
    }

    #[test]
    fn split_assigns_stem_and_feature_groups() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_encoder_params(&mut set, &cfg, &mut rng).unwrap();
        assert_eq!(
            set.get("encoder.block0.attn.wq").unwrap().group,
            ParamGroup::Stem
        );
        assert_eq!(
            set.get("encoder.block1.attn.wq").unwrap().group,
            ParamGroup::Feature
        );
        assert_eq!(set.get("encoder.cls").unwrap().group, ParamGroup::Stem);
    }

    #[test]
    fn head_mean_keeps_rows_normalized() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_encoder_params(&mut set, &cfg, &mut rng).unwrap();
        let out = encode_image(&set, &cfg, &random_image(8, 8, 9)).unwrap();
        assert_eq!(out.attention.len(), 2);
        let mean = head_mean_attention(&out.attention[0]).unwrap();
        for r in 0..5 {
            let s: f64 = (0..5).map(|c| mean.at(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
        }
    }
}
