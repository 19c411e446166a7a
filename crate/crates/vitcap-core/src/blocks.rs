//! Pre-norm transformer blocks shared by the encoder, the concept head,
//! and the decoder. Parameters are addressed by a dotted name prefix so a
//! block is fully described by `(prefix, dims)`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamSet};
use crate::tape::{BoolMask, Tape, VarId};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::config(format!(
                "block dims must be positive, got dim {} heads {} mlp_ratio {}",
                self.dim, self.heads, self.mlp_ratio
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// The sixteen parameter names of one block, in insertion order.
pub fn block_param_names(prefix: &str) -> Vec<String> {
    [
        "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv",
        "attn.bv", "attn.wo", "attn.bo", "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1", "mlp.w2",
        "mlp.b2",
    ]
    .iter()
    .map(|s| format!("{prefix}.{s}"))
    .collect()
}

pub fn init_block<T: Scalar>(
    set: &mut ParamSet<T>,
    prefix: &str,
    dims: BlockDims,
    group: ParamGroup,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    dims.validate()?;
    let d = dims.dim;
    let hidden = d * dims.mlp_ratio;
    let ones = |n: usize| Tensor::full(vec![n], T::one());
    let zeros = |n: usize| Tensor::zeros(vec![n]);
    set.insert(format!("{prefix}.ln1.gamma"), group, ones(d))?;
    set.insert(format!("{prefix}.ln1.beta"), group, zeros(d))?;
    for w in ["wq", "wk", "wv", "wo"] {
        set.insert(
            format!("{prefix}.attn.{w}"),
            group,
            Tensor::randn(vec![d, d], INIT_STD, rng),
        )?;
        let b = &w[1..];
        set.insert(format!("{prefix}.attn.b{b}"), group, zeros(d))?;
    }
    set.insert(format!("{prefix}.ln2.gamma"), group, ones(d))?;
    set.insert(format!("{prefix}.ln2.beta"), group, zeros(d))?;
    set.insert(
        format!("{prefix}.mlp.w1"),
        group,
        Tensor::randn(vec![d, hidden], INIT_STD, rng),
    )?;
    set.insert(format!("{prefix}.mlp.b1"), group, zeros(hidden))?;
    set.insert(
        format!("{prefix}.mlp.w2"),
        group,
        Tensor::randn(vec![hidden, d], INIT_STD, rng),
    )?;
    set.insert(format!("{prefix}.mlp.b2"), group, zeros(d))?;
    Ok(())
}

fn ln<T: Scalar>(
    tape: &mut Tape<T>,
    set: &ParamSet<T>,
    prefix: &str,
    which: &str,
    x: VarId,
) -> Result<VarId> {
    let gamma = tape.param(set, &format!("{prefix}.{which}.gamma"))?;
    let beta = tape.param(set, &format!("{prefix}.{which}.beta"))?;
    tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// Multi-head self-attention over `[seq, dim]`. When `capture` is given,
/// each head's post-softmax weight matrix `[seq, seq]` is pushed onto it.
fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    set: &ParamSet<T>,
    prefix: &str,
    x: VarId,
    dims: BlockDims,
    mask: Option<&Arc<BoolMask>>,
    capture: Option<&mut Vec<VarId>>,
) -> Result<VarId> {
    let hd = dims.head_dim();
    let wq = tape.param(set, &format!("{prefix}.attn.wq"))?;
    let bq = tape.param(set, &format!("{prefix}.attn.bq"))?;
    let wk = tape.param(set, &format!("{prefix}.attn.wk"))?;
    let bk = tape.param(set, &format!("{prefix}.attn.bk"))?;
    let wv = tape.param(set, &format!("{prefix}.attn.wv"))?;
    let bv = tape.param(set, &format!("{prefix}.attn.bv"))?;
    let q = tape.linear(x, wq, bq)?;
    let k = tape.linear(x, wk, bk)?;
    let v = tape.linear(x, wv, bv)?;
    let seq = tape.shape(x)[0];
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(dims.heads);
    let mut captured = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let (c0, c1) = (h * hd, (h + 1) * hd);
        let qh = tape.slice(q, 0, seq, c0, c1)?;
        let kh = tape.slice(k, 0, seq, c0, c1)?;
        let vh = tape.slice(v, 0, seq, c0, c1)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let weights = match mask {
            Some(m) => tape.masked_softmax(scaled, m)?,
            None => tape.softmax(scaled)?,
        };
        captured.push(weights);
        heads.push(tape.matmul(weights, vh)?);
    }
    if let Some(out) = capture {
        out.extend(captured);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(1, &heads)?
    };
    let wo = tape.param(set, &format!("{prefix}.attn.wo"))?;
    let bo = tape.param(set, &format!("{prefix}.attn.bo"))?;
    tape.linear(merged, wo, bo)
}

/// One pre-norm block: `x + attn(ln1(x))`, then `y + mlp(ln2(y))`.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    set: &ParamSet<T>,
    prefix: &str,
    x: VarId,
    dims: BlockDims,
    mask: Option<&Arc<BoolMask>>,
    capture: Option<&mut Vec<VarId>>,
) -> Result<VarId> {
    let h = ln(tape, set, prefix, "ln1", x)?;
    let att = attention(tape, set, prefix, h, dims, mask, capture)?;
    let y = tape.add(x, att)?;
    let h2 = ln(tape, set, prefix, "ln2", y)?;
    let w1 = tape.param(set, &format!("{prefix}.mlp.w1"))?;
    let b1 = tape.param(set, &format!("{prefix}.mlp.b1"))?;
    let w2 = tape.param(set, &format!("{prefix}.mlp.w2"))?;
    let b2 = tape.param(set, &format!("{prefix}.mlp.b2"))?;
    let mid = tape.linear(h2, w1, b1)?;
    let act = tape.gelu(mid)?;
    let mlp = tape.linear(act, w2, b2)?;
    tape.add(y, mlp)
}
