//! Whole decoder: broadcasts part information back into every pixel, then
//! refines pixels with self-attention inside non-overlapping windows.

use crate::attention::{check_heads, head_scale, merge_heads, split_heads, AttentionWeights, SelfAttentionWeights};
use crate::encoder::{PartState, WholeState};
use crate::error::{Error, Result};
use crate::params::{Mlp, ParamBuilder, Session};
use crate::positional::{relative_logits, RelativeEmbedding};
use crate::tensor::{Scalar, Tensor, Var, GATHER_ZERO};

/// Hidden width multiplier of both decoder MLPs.
pub const DECODER_MLP_RATIO: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderWeights {
    pub global: AttentionWeights,
    pub global_mlp: Mlp,
    pub local: SelfAttentionWeights,
    pub rel: RelativeEmbedding,
    pub local_mlp: Mlp,
}

impl DecoderWeights {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, heads: usize, window: usize) -> Result<Self> {
        let d = check_heads("decoder", channels, heads)?;
        if d % 2 != 0 {
            return Err(Error::dim("decoder", format!("head width {d} must be even for relative tables")));
        }
        b.push_scope(name);
        let w = Self {
            global: AttentionWeights::new(b, "global", channels),
            global_mlp: b.mlp("global_mlp", channels, DECODER_MLP_RATIO * channels),
            local: SelfAttentionWeights::new(b, "local", channels),
            rel: RelativeEmbedding::new(b, "local", window, channels)?,
            local_mlp: b.mlp("local_mlp", channels, DECODER_MLP_RATIO * channels),
        };
        b.pop_scope();
        Ok(w)
    }
}

/// Decoder-side positional terms: whole grid `[L, C]` and part codes `[N, C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderCodes {
    pub whole: Var,
    pub parts: Var,
}

/// Pixels query parts: `x + proj(Attn(LN(x + d_w), LN(p + d_d), LN(p)))`
/// with the softmax over the part axis, followed by a residual MLP.
/// Returns the new whole state and the `[B, G, L, N]` attention weights.
pub fn global_decode<T: Scalar>(
    s: &mut Session<'_, T>,
    x: &WholeState,
    p: &PartState,
    codes: &DecoderCodes,
    w: &DecoderWeights,
    heads: usize,
    drop_rate: f64,
) -> Result<(WholeState, Var)> {
    let c = *s.tape.shape(x.values).last().unwrap_or(&0);
    check_heads("global_decode", c, heads)?;
    if s.tape.shape(p.values).last() != Some(&c) || p.stage != x.stage {
        return Err(Error::shape("global_decode", s.tape.shape(x.values), s.tape.shape(p.values)));
    }
    let a = &w.global;
    let qin = s.tape.add(x.values, codes.whole)?;
    let qin = s.layer_norm(qin, &a.norm_q)?;
    let q = s.linear(qin, &a.q)?;
    let q = split_heads(s, q, heads)?;
    let kin = s.tape.add(p.values, codes.parts)?;
    let kin = s.layer_norm(kin, &a.norm_k)?;
    let k = s.linear(kin, &a.k)?;
    let k = split_heads(s, k, heads)?;
    let vin = s.layer_norm(p.values, &a.norm_v)?;
    let v = s.linear(vin, &a.v)?;
    let v = split_heads(s, v, heads)?;

    let raw = s.tape.matmul_nt(q, k)?;
    let logits = s.tape.scale(raw, head_scale(c, heads));
    let attn = s.tape.softmax(logits)?;
    let o = s.tape.matmul(attn, v)?;
    let o = merge_heads(s, o)?;
    let o = s.linear(o, &a.proj)?;
    let o = s.drop_path(o, drop_rate)?;
    let xg = s.tape.add(x.values, o)?;

    let m = s.mlp(xg, &w.global_mlp)?;
    let m = s.drop_path(m, drop_rate)?;
    let values = s.tape.add(xg, m)?;
    Ok((WholeState { values, ..*x }, attn))
}

/// Tiling of an `height × width` map into `k × k` windows, zero-padded at the
/// bottom and right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLayout {
    pub window: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    /// Row-major over the padded grid; `true` for real pixels.
    pub mask: Vec<bool>,
}

impl PatchLayout {
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::dim("patch_partition", "window must be at least 1"));
        }
        let padded_height = height.div_ceil(window) * window;
        let padded_width = width.div_ceil(window) * window;
        let mask = (0..padded_height * padded_width)
            .map(|i| i / padded_width < height && i % padded_width < width)
            .collect();
        Ok(Self {
            window,
            height,
            width,
            padded_height,
            padded_width,
            mask,
        })
    }

    pub fn patches_high(&self) -> usize {
        self.padded_height / self.window
    }

    pub fn patches_wide(&self) -> usize {
        self.padded_width / self.window
    }

    pub fn num_patches(&self) -> usize {
        self.patches_high() * self.patches_wide()
    }

    pub fn patch_area(&self) -> usize {
        self.window * self.window
    }

    pub fn is_padded(&self) -> bool {
        self.padded_height != self.height || self.padded_width != self.width
    }

    /// Source pixel of slot `j` in patch `t`, or `None` for padding.
    pub fn source(&self, t: usize, j: usize) -> Option<usize> {
        let k = self.window;
        let (ty, tx) = (t / self.patches_wide(), t % self.patches_wide());
        let y = ty * k + j / k;
        let x = tx * k + j % k;
        (y < self.height && x < self.width).then_some(y * self.width + x)
    }

    /// `(patch, slot)` holding pixel `i` of the unpadded map.
    pub fn slot(&self, i: usize) -> (usize, usize) {
        let k = self.window;
        let (y, x) = (i / self.width, i % self.width);
        ((y / k) * self.patches_wide() + x / k, (y % k) * k + x % k)
    }

    fn partition_index(&self, batch: usize, channels: usize) -> Vec<u32> {
        let (np, k2, l) = (self.num_patches(), self.patch_area(), self.height * self.width);
        let mut idx = Vec::with_capacity(batch * np * k2 * channels);
        for b in 0..batch {
            for t in 0..np {
                for j in 0..k2 {
                    match self.source(t, j) {
                        Some(i) => idx.extend((0..channels).map(|c| ((b * l + i) * channels + c) as u32)),
                        None => idx.extend(std::iter::repeat_n(GATHER_ZERO, channels)),
                    }
                }
            }
        }
        idx
    }

    fn merge_index(&self, batch: usize, channels: usize) -> Vec<u32> {
        let (np, k2, l) = (self.num_patches(), self.patch_area(), self.height * self.width);
        let mut idx = Vec::with_capacity(batch * l * channels);
        for b in 0..batch {
            for i in 0..l {
                let (t, j) = self.slot(i);
                idx.extend((0..channels).map(|c| (((b * np + t) * k2 + j) * channels + c) as u32));
            }
        }
        idx
    }

    /// Additive key mask `[N_p, 1, 1, k²]`: 0 for real pixels, −∞ for padding.
    pub fn key_mask<T: Scalar>(&self) -> Tensor<T> {
        let (np, k2) = (self.num_patches(), self.patch_area());
        Tensor::from_fn(&[np, 1, 1, k2], |i| {
            if self.source(i / k2, i % k2).is_some() {
                T::zero()
            } else {
                T::neg_infinity()
            }
        })
    }
}

/// `[B, L, C]` → `[B, N_p, k², C]` on plain tensors.
pub fn partition_tensor<T: Scalar>(x: &Tensor<T>, layout: &PatchLayout) -> Result<Tensor<T>> {
    let [b, l, c] = x.shape() else {
        return Err(Error::dim("patch_partition", format!("expected [B, L, C], got {:?}", x.shape())));
    };
    if *l != layout.height * layout.width {
        return Err(Error::dim("patch_partition", format!("{l} pixels for a {}x{} layout", layout.height, layout.width)));
    }
    let idx = layout.partition_index(*b, *c);
    let data = idx
        .iter()
        .map(|&i| if i == GATHER_ZERO { T::zero() } else { x.data()[i as usize] })
        .collect();
    Tensor::new(&[*b, layout.num_patches(), layout.patch_area(), *c], data)
}

/// Inverse of [`partition_tensor`]: crops padding and restores `[B, L, C]`.
pub fn merge_tensor<T: Scalar>(patches: &Tensor<T>, layout: &PatchLayout) -> Result<Tensor<T>> {
    let [b, np, k2, c] = patches.shape() else {
        return Err(Error::dim("patch_merge", format!("expected [B, N_p, k², C], got {:?}", patches.shape())));
    };
    if *np != layout.num_patches() || *k2 != layout.patch_area() {
        return Err(Error::dim("patch_merge", "patch grid does not match layout"));
    }
    let idx = layout.merge_index(*b, *c);
    let data = idx.iter().map(|&i| patches.data()[i as usize]).collect();
    Tensor::new(&[*b, layout.height * layout.width, *c], data)
}

/// Splits a whole state into zero-padded `k × k` windows `[B, N_p, k², C]`.
pub fn patch_partition<T: Scalar>(s: &mut Session<'_, T>, x: &WholeState, window: usize) -> Result<(Var, PatchLayout)> {
    let layout = PatchLayout::new(x.height, x.width, window)?;
    let shape = s.tape.shape(x.values).to_vec();
    let [b, l, c] = shape[..] else {
        return Err(Error::dim("patch_partition", format!("expected [B, L, C], got {shape:?}")));
    };
    if l != x.len() {
        return Err(Error::dim("patch_partition", format!("{l} pixels for a {}x{} map", x.height, x.width)));
    }
    let idx = layout.partition_index(b, c);
    let v = s.tape.gather(x.values, idx, &[b, layout.num_patches(), layout.patch_area(), c])?;
    Ok((v, layout))
}

/// Reassembles windows into `[B, L, C]`, dropping padded slots.
pub fn patch_merge<T: Scalar>(s: &mut Session<'_, T>, patches: Var, layout: &PatchLayout) -> Result<Var> {
    let shape = s.tape.shape(patches).to_vec();
    let [b, np, k2, c] = shape[..] else {
        return Err(Error::dim("patch_merge", format!("expected [B, N_p, k², C], got {shape:?}")));
    };
    if np != layout.num_patches() || k2 != layout.patch_area() {
        return Err(Error::dim("patch_merge", "patch grid does not match layout"));
    }
    let idx = layout.merge_index(b, c);
    s.tape.gather(patches, idx, &[b, layout.height * layout.width, c])
}

/// Output of [`local_attention`].
#[derive(Debug, Clone, Copy)]
pub struct LocalOutput {
    pub whole: WholeState,
    /// Whole state after the windowed attention residual, before the MLP.
    pub pre_mlp: Var,
    /// `[B, N_p, G, k², k²]` attention weights.
    pub attention: Var,
}

/// Windowed self-attention with relative-position logits on keys, then a
/// residual MLP over the reassembled map.
pub fn local_attention<T: Scalar>(
    s: &mut Session<'_, T>,
    x: &WholeState,
    w: &DecoderWeights,
    heads: usize,
    drop_rate: f64,
) -> Result<LocalOutput> {
    let c = *s.tape.shape(x.values).last().unwrap_or(&0);
    check_heads("local_attention", c, heads)?;
    let (patches, layout) = patch_partition(s, x, w.rel.window)?;
    local_attention_on_patches(s, x, patches, &layout, w, heads, drop_rate)
}

/// [`local_attention`] on pre-partitioned windows.
pub fn local_attention_on_patches<T: Scalar>(
    s: &mut Session<'_, T>,
    x: &WholeState,
    patches: Var,
    layout: &PatchLayout,
    w: &DecoderWeights,
    heads: usize,
    drop_rate: f64,
) -> Result<LocalOutput> {
    if layout.window != w.rel.window {
        return Err(Error::dim(
            "local_attention",
            format!("patch window {} does not match relative tables for window {}", layout.window, w.rel.window),
        ));
    }
    let c = *s.tape.shape(x.values).last().unwrap_or(&0);
    let a = &w.local;
    let h = s.layer_norm(patches, &a.norm)?;
    let q = s.linear(h, &a.q)?;
    let q = split_heads(s, q, heads)?;
    let k = s.linear(h, &a.k)?;
    let k = split_heads(s, k, heads)?;
    let v = s.linear(h, &a.v)?;
    let v = split_heads(s, v, heads)?;

    let content = s.tape.matmul_nt(q, k)?;
    let rel = relative_logits(s, q, &w.rel)?;
    let logits = s.tape.add(content, rel)?;
    let logits = s.tape.scale(logits, head_scale(c, heads));
    let logits = if layout.is_padded() {
        let mask = s.constant(layout.key_mask());
        s.tape.add(logits, mask)?
    } else {
        logits
    };
    let attn = s.tape.softmax(logits)?;
    let o = s.tape.matmul(attn, v)?;
    let o = merge_heads(s, o)?;
    let o = s.linear(o, &a.proj)?;
    let o = patch_merge(s, o, layout)?;
    let o = s.drop_path(o, drop_rate)?;
    let xl = s.tape.add(x.values, o)?;

    let m = s.mlp(xl, &w.local_mlp)?;
    let m = s.drop_path(m, drop_rate)?;
    let values = s.tape.add(xl, m)?;
    Ok(LocalOutput {
        whole: WholeState { values, ..*x },
        pre_mlp: xl,
        attention: attn,
    })
}
