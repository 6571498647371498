//! Closed-form parameter and multiply–accumulate counts. Nothing is
//! allocated: the counts follow the construction in `model.rs` term by term,
//! so building a model and counting its store gives the same number.
//!
//! One multiply–accumulate counts as one FLOP. Counted: convolutions, every
//! linear map, attention logits (content and relative) and weighted sums,
//! part mixing. Normalizations, activations, softmax, pooling and additions
//! are not counted.

use serde::Serialize;

use crate::decoder::DECODER_MLP_RATIO;
use crate::network::spec::{HeadKind, VariantSpec, NUM_STAGES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostItem {
    pub module: String,
    pub params: u64,
    pub macs: u64,
}

/// Parameter and MAC totals with a per-module breakdown; the totals are
/// the sums of the breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub variant: String,
    pub input: (usize, usize),
    pub params: u64,
    pub macs: u64,
    pub breakdown: Vec<CostItem>,
}

impl CostReport {
    /// Builds the report for a spec at an input size.
    pub fn new(spec: &VariantSpec, height: usize, width: usize) -> Self {
        let mut items = Vec::new();
        let mut push = |module: String, params: u64, macs: u64| items.push(CostItem { module, params, macs });

        let sw = spec.stem_width as u64;
        let (h1, w1) = (conv_out(height, 7, 2, 3), conv_out(width, 7, 2, 3));
        push(
            "stem".into(),
            sw * 3 * 49 + sw + 2 * sw,
            sw * 3 * 49 * (h1 * w1) as u64,
        );
        let (mut h, mut w) = (conv_out(h1, 3, 2, 1), conv_out(w1, 3, 2, 1));
        push("prototype".into(), (spec.parts[0] * spec.channels[0]) as u64, 0);

        for s in 0..NUM_STAGES {
            let c = spec.channels[s] as u64;
            let n = spec.parts[s] as u64;
            let k = spec.windows[s];
            let (c_in, n_in) = if s == 0 {
                (sw, n)
            } else {
                (spec.channels[s - 1] as u64, spec.parts[s - 1] as u64)
            };
            let stride = if s == 0 { 1 } else { 2 };
            let (ho, wo) = (conv_out(h, 3, stride, 1), conv_out(w, 3, stride, 1));
            let l = (ho * wo) as u64;

            let mut embed_p = c_in * 9 + c_in + c_in * c + c + 2 * c;
            let mut embed_m = c_in * 9 * l + c_in * c * l;
            if s > 0 {
                embed_p += c_in * c + c;
                embed_m += n_in * c_in * c;
                if n != n_in {
                    embed_p += n * n_in + n;
                    embed_m += n * n_in * c;
                }
            }
            push(format!("stages.{s}.embed"), embed_p, embed_m);
            push(format!("stages.{s}.codes"), 2 * n * c, 0);

            let lp = (ho.div_ceil(k) * k * wo.div_ceil(k) * k) as u64;
            let k2 = (k * k) as u64;
            for b in 0..spec.blocks[s] {
                let (ep, em) = encoder_cost(n, c, l, true);
                push(format!("stages.{s}.blocks.{b}.encoder"), ep, em);

                let r = DECODER_MLP_RATIO as u64;
                let mlp_p = 2 * c + (c * r * c + r * c) + (r * c * c + c);
                let mlp_m = 2 * r * c * c;
                let global_p = 6 * c + 4 * (c * c + c) + mlp_p;
                let global_m = l * c * c + 2 * n * c * c + 2 * l * n * c + l * c * c + l * mlp_m;
                push(format!("stages.{s}.blocks.{b}.decoder.global"), global_p, global_m);

                let local_p = 2 * c + 4 * (c * c + c) + (2 * k as u64 - 1) * c + mlp_p;
                let local_m = 3 * lp * c * c + 3 * lp * k2 * c + lp * c * c + l * mlp_m;
                push(format!("stages.{s}.blocks.{b}.decoder.local"), local_p, local_m);
            }
            h = ho;
            w = wo;
        }

        let c = spec.channels[NUM_STAGES - 1] as u64;
        let n = spec.parts[NUM_STAGES - 1] as u64;
        let k = spec.num_classes as u64;
        let l = (h * w) as u64;
        match spec.head {
            HeadKind::Parts => {
                let (ep, em) = encoder_cost(n, c, l, false);
                push("head.encoder".into(), ep, em);
            }
            HeadKind::Wholes => push("head.linear".into(), c * c + c + 2 * c, l * c * c),
        }
        push("head.classifier".into(), c * k + k, c * k);

        Self {
            variant: spec.name.clone(),
            input: (height, width),
            params: items.iter().map(|i| i.params).sum(),
            macs: items.iter().map(|i| i.macs).sum(),
            breakdown: items,
        }
    }
}

/// One encoder: attention (three norms, four linears), part mixing, and the
/// optional square MLP.
fn encoder_cost(n: u64, c: u64, l: u64, with_mlp: bool) -> (u64, u64) {
    let mut p = 6 * c + 4 * (c * c + c) + 2 * c + n * n + n;
    let mut m = n * c * c + 2 * l * c * c + 2 * n * l * c + n * c * c + n * n * c;
    if with_mlp {
        p += 2 * c + 2 * (c * c + c);
        m += 2 * n * c * c;
    }
    (p, m)
}

fn conv_out(side: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (side + 2 * padding - kernel) / stride + 1
}

/// Exact learnable-scalar count of a variant, independent of input size.
pub fn count_params(spec: &VariantSpec) -> u64 {
    CostReport::new(spec, 224, 224).params
}

/// Multiply–accumulate count of one forward pass of a single image.
pub fn count_flops(spec: &VariantSpec, height: usize, width: usize) -> u64 {
    CostReport::new(spec, height, width).macs
}
