//! Part encoder: condenses the whole feature map into part vectors through
//! attention, mixes information across parts, then activates them.

use crate::attention::{check_heads, head_scale, merge_heads, split_heads, AttentionWeights};
use crate::error::{Error, Result};
use crate::params::{LayerNorm, Mlp, ParamBuilder, ParamId, Session, WeightInit};
use crate::tensor::{Scalar, Var};

/// Part representation `[B, N, C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartState {
    pub values: Var,
    pub stage: usize,
    pub block: usize,
}

/// Whole representation `[B, L, C]` with `L = height·width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WholeState {
    pub values: Var,
    pub height: usize,
    pub width: usize,
    pub stage: usize,
}

impl WholeState {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Softmax-normalized part-to-pixel weights `[B, G, N, L]`; every
/// `(head, part)` row sums to one over the pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffinityTensor {
    pub weights: Var,
    pub logits: Var,
    pub heads: usize,
}

/// `p̂ + W_p·LN(p̂) + b_p` with `W_p ∈ R^{N×N}` mixing along the part axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartReasoning {
    pub norm: LayerNorm,
    pub weight: ParamId,
    pub bias: ParamId,
    pub parts: usize,
}

impl PartReasoning {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, parts: usize, channels: usize) -> Self {
        b.push_scope(name);
        let r = Self {
            norm: b.norm("norm", channels),
            weight: b.weight("weight", &[parts, parts], WeightInit::Zero),
            bias: b.bias("bias", &[parts, 1]),
            parts,
        };
        b.pop_scope();
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderWeights {
    pub attn: AttentionWeights,
    pub reasoning: PartReasoning,
    /// Square MLP; `None` for the classification encoder, which applies a
    /// bare GELU to the reasoned parts instead.
    pub mlp: Option<Mlp>,
}

impl EncoderWeights {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        parts: usize,
        channels: usize,
        with_mlp: bool,
    ) -> Self {
        b.push_scope(name);
        let w = Self {
            attn: AttentionWeights::new(b, "attn", channels),
            reasoning: PartReasoning::new(b, "reason", parts, channels),
            mlp: with_mlp.then(|| b.mlp("mlp", channels, channels)),
        };
        b.pop_scope();
        w
    }
}

/// Encoder-side positional terms: part codes `[N, C]` and whole grid `[L, C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderCodes {
    pub parts: Var,
    pub whole: Var,
}

/// Affinity between parts (queries) and pixels (keys), per head:
/// `softmax_L(q(LN(p + d_e)) · k(LN(x + d_w))ᵀ / √(C/G))`.
pub fn affinity<T: Scalar>(
    s: &mut Session<'_, T>,
    p: &PartState,
    x: &WholeState,
    codes: &EncoderCodes,
    w: &AttentionWeights,
    heads: usize,
) -> Result<AffinityTensor> {
    let c = *s.tape.shape(p.values).last().unwrap_or(&0);
    check_heads("affinity", c, heads)?;
    if s.tape.shape(x.values).last() != Some(&c) {
        return Err(Error::shape("affinity", s.tape.shape(p.values), s.tape.shape(x.values)));
    }
    let qin = s.tape.add(p.values, codes.parts)?;
    let qin = s.layer_norm(qin, &w.norm_q)?;
    let q = s.linear(qin, &w.q)?;
    let q = split_heads(s, q, heads)?;
    let kin = s.tape.add(x.values, codes.whole)?;
    let kin = s.layer_norm(kin, &w.norm_k)?;
    let k = s.linear(kin, &w.k)?;
    let k = split_heads(s, k, heads)?;
    let raw = s.tape.matmul_nt(q, k)?;
    let logits = s.tape.scale(raw, head_scale(c, heads));
    let weights = s.tape.softmax(logits)?;
    Ok(AffinityTensor { weights, logits, heads })
}

/// Weighted average of pixel values per part, heads concatenated and
/// projected: `proj(concat_g M̂_g · v_g(LN(x)))`. Residual not included.
pub fn attend_whole_to_parts<T: Scalar>(
    s: &mut Session<'_, T>,
    affinity: &AffinityTensor,
    x: &WholeState,
    w: &AttentionWeights,
) -> Result<Var> {
    let vin = s.layer_norm(x.values, &w.norm_v)?;
    let v = s.linear(vin, &w.v)?;
    let v = split_heads(s, v, affinity.heads)?;
    let o = s.tape.matmul(affinity.weights, v)?;
    let o = merge_heads(s, o)?;
    s.linear(o, &w.proj)
}

/// Reasoning branch `W_p·LN(p̂) + b_p` without the residual.
pub fn part_reasoning_branch<T: Scalar>(s: &mut Session<'_, T>, p_hat: Var, r: &PartReasoning) -> Result<Var> {
    let n = s.tape.shape(p_hat)[s.tape.shape(p_hat).len() - 2];
    if n != r.parts {
        return Err(Error::dim(
            "part_reasoning",
            format!("{n} parts given to a {0}×{0} mixing matrix", r.parts),
        ));
    }
    let h = s.layer_norm(p_hat, &r.norm)?;
    let wp = s.param(r.weight);
    let bp = s.param(r.bias);
    let mixed = s.tape.matmul(wp, h)?;
    s.tape.add(mixed, bp)
}

/// `p̂ + W_p·LN(p̂) + b_p`.
pub fn part_reasoning<T: Scalar>(s: &mut Session<'_, T>, p_hat: Var, r: &PartReasoning) -> Result<Var> {
    let branch = part_reasoning_branch(s, p_hat, r)?;
    s.tape.add(p_hat, branch)
}

/// `p̂_r + W_f2·σ(W_f1·LN(p̂_r))`.
pub fn part_mlp<T: Scalar>(
    s: &mut Session<'_, T>,
    p_hat_r: Var,
    mlp: &Mlp,
    stage: usize,
    block: usize,
) -> Result<PartState> {
    let branch = s.mlp(p_hat_r, mlp)?;
    let values = s.tape.add(p_hat_r, branch)?;
    Ok(PartState { values, stage, block })
}

/// One full encoder pass: attention residual, part reasoning, activation.
/// `drop_rate` applies stochastic depth to each residual branch in
/// training sessions. `x_prev` is read only.
pub fn encode<T: Scalar>(
    s: &mut Session<'_, T>,
    p_prev: &PartState,
    x_prev: &WholeState,
    codes: &EncoderCodes,
    w: &EncoderWeights,
    heads: usize,
    drop_rate: f64,
) -> Result<(PartState, AffinityTensor)> {
    if p_prev.stage != x_prev.stage {
        return Err(Error::dim(
            "encode",
            format!("part stage {} does not match whole stage {}", p_prev.stage, x_prev.stage),
        ));
    }
    let aff = affinity(s, p_prev, x_prev, codes, &w.attn, heads)?;
    let attended = attend_whole_to_parts(s, &aff, x_prev, &w.attn)?;
    let attended = s.drop_path(attended, drop_rate)?;
    let p_hat = s.tape.add(p_prev.values, attended)?;

    let reasoned = part_reasoning_branch(s, p_hat, &w.reasoning)?;
    let reasoned = s.drop_path(reasoned, drop_rate)?;
    let p_hat_r = s.tape.add(p_hat, reasoned)?;

    let block = p_prev.block + 1;
    let values = match &w.mlp {
        Some(mlp) => {
            let branch = s.mlp(p_hat_r, mlp)?;
            let branch = s.drop_path(branch, drop_rate)?;
            s.tape.add(p_hat_r, branch)?
        }
        None => s.tape.gelu(p_hat_r),
    };
    Ok((
        PartState {
            values,
            stage: p_prev.stage,
            block,
        },
        aff,
    ))
}
