//! Multi-head attention pieces shared by the encoder and decoder.

use crate::error::{Error, Result};
use crate::params::{LayerNorm, Linear, ParamBuilder, Session, WeightInit};
use crate::tensor::{Scalar, Var};

/// Pre-normalized attention projections: separate layer norms on the query,
/// key and value inputs, linear maps, and an output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionWeights {
    pub norm_q: LayerNorm,
    pub norm_k: LayerNorm,
    pub norm_v: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

impl AttentionWeights {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        b.push_scope(name);
        let w = Self {
            norm_q: b.norm("norm_q", channels),
            norm_k: b.norm("norm_k", channels),
            norm_v: b.norm("norm_v", channels),
            q: b.linear("q", channels, channels, WeightInit::TruncNormal),
            k: b.linear("k", channels, channels, WeightInit::TruncNormal),
            v: b.linear("v", channels, channels, WeightInit::TruncNormal),
            proj: b.linear("proj", channels, channels, WeightInit::Zero),
        };
        b.pop_scope();
        w
    }
}

/// Self-attention projections with a single input norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfAttentionWeights {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

impl SelfAttentionWeights {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        b.push_scope(name);
        let w = Self {
            norm: b.norm("norm", channels),
            q: b.linear("q", channels, channels, WeightInit::TruncNormal),
            k: b.linear("k", channels, channels, WeightInit::TruncNormal),
            v: b.linear("v", channels, channels, WeightInit::TruncNormal),
            proj: b.linear("proj", channels, channels, WeightInit::Zero),
        };
        b.pop_scope();
        w
    }
}

/// Per-head logit scale `1/√(C/G)`.
pub fn head_scale(channels: usize, heads: usize) -> f64 {
    1.0 / ((channels / heads) as f64).sqrt()
}

pub fn check_heads(op: &'static str, channels: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::dim(op, format!("{channels} channels not divisible by {heads} heads")));
    }
    Ok(channels / heads)
}

/// `[.., len, C]` → `[.., G, len, C/G]`.
pub fn split_heads<T: Scalar>(s: &mut Session<'_, T>, x: Var, heads: usize) -> Result<Var> {
    let shape = s.tape.shape(x).to_vec();
    let r = shape.len();
    let c = shape[r - 1];
    let d = check_heads("split_heads", c, heads)?;
    let mut split = shape[..r - 1].to_vec();
    split.extend([heads, d]);
    let y = s.tape.reshape(x, &split)?;
    // [.., len, G, d] -> [.., G, len, d]
    let mut perm: Vec<usize> = (0..r - 2).collect();
    perm.extend([r - 1, r - 2, r]);
    s.tape.permute(y, &perm)
}

/// `[.., G, len, d]` → `[.., len, G·d]`.
pub fn merge_heads<T: Scalar>(s: &mut Session<'_, T>, x: Var) -> Result<Var> {
    let shape = s.tape.shape(x).to_vec();
    let r = shape.len();
    let mut perm: Vec<usize> = (0..r - 3).collect();
    perm.extend([r - 2, r - 3, r - 1]);
    let y = s.tape.permute(x, &perm)?;
    let mut merged = shape[..r - 3].to_vec();
    merged.extend([shape[r - 2], shape[r - 3] * shape[r - 1]]);
    s.tape.reshape(y, &merged)
}
