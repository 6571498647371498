//! Positional encodings: the fixed 2-D sinusoidal grid for whole features,
//! learnable part codes, and factorized relative tables for windowed
//! attention.

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId, Session};
use crate::tensor::{lit, Scalar, Tensor, Var};

pub const SINE_TEMPERATURE: f64 = 10_000.0;

/// Fixed sinusoidal encoding of an `height × width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidalGrid<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `[height·width, channels]`, row-major over the grid.
    pub values: Tensor<T>,
}

/// 2-D sine/cosine grid. The first `C/2` channels encode the row, the last
/// `C/2` the column; within each half channels alternate
/// `sin(pos/T^(2i/(C/2))), cos(pos/T^(2i/(C/2)))` with 0-based positions.
pub fn sinusoidal_2d<T: Scalar>(height: usize, width: usize, channels: usize) -> Result<SinusoidalGrid<T>> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::dim(
            "sinusoidal_2d",
            format!("channel count {channels} must be a positive multiple of 4"),
        ));
    }
    let half = channels / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| SINE_TEMPERATURE.powf((2 * (i / 2)) as f64 / half as f64))
        .collect();
    let encode = |pos: f64, out: &mut [T]| {
        for (i, (o, f)) in out.iter_mut().zip(&freqs).enumerate() {
            let a = pos / f;
            *o = lit(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    };
    let mut values = Tensor::zeros(&[height * width, channels]);
    for y in 0..height {
        for x in 0..width {
            let row = &mut values.data_mut()[(y * width + x) * channels..(y * width + x + 1) * channels];
            encode(y as f64, &mut row[..half]);
            encode(x as f64, &mut row[half..]);
        }
    }
    Ok(SinusoidalGrid {
        height,
        width,
        channels,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeRole {
    EncoderPart,
    DecoderPart,
    Prototype,
}

/// A learnable `[N, C]` table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LearnableCodes {
    pub role: CodeRole,
    pub stage: usize,
    pub parts: usize,
    pub channels: usize,
    pub values: ParamId,
}

impl LearnableCodes {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        role: CodeRole,
        stage: usize,
        parts: usize,
        channels: usize,
    ) -> Self {
        let values = b.code(name, &[parts, channels]);
        Self {
            role,
            stage,
            parts,
            channels,
            values,
        }
    }
}

/// Per-stage codes shared by every block of the stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageCodes {
    pub encoder: LearnableCodes,
    pub decoder: LearnableCodes,
}

/// Height and width offset tables, each `(2k−1) × C/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelativeEmbedding {
    pub window: usize,
    pub channels: usize,
    pub height: ParamId,
    pub width: ParamId,
}

impl RelativeEmbedding {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, window: usize, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) || window == 0 {
            return Err(Error::dim(
                "relative_embedding",
                format!("window {window} / channels {channels}: need k ≥ 1 and even C"),
            ));
        }
        let rows = 2 * window - 1;
        let height = b.code(&format!("{name}.rel_h"), &[rows, channels / 2]);
        let width = b.code(&format!("{name}.rel_w"), &[rows, channels / 2]);
        Ok(Self {
            window,
            channels,
            height,
            width,
        })
    }
}

/// Relative-position logits for per-head queries `[.., heads, k², d]`.
///
/// `logits[a, b] = q_a · (r_h[Δy] ⊕ r_w[Δx])` restricted to the head's slice
/// of the tables, with `Δ = key − query` shifted by `k − 1` to index rows.
pub fn relative_logits<T: Scalar>(s: &mut Session<'_, T>, q: Var, emb: &RelativeEmbedding) -> Result<Var> {
    let rh = s.param(emb.height);
    let rw = s.param(emb.width);
    s.tape.rel_logits(q, rh, rw, emb.window)
}
