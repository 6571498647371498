use crate::decoder::{global_decode, local_attention, DecoderCodes, DecoderWeights};
use crate::encoder::{encode, AffinityTensor, EncoderCodes, EncoderWeights, PartState, WholeState};
use crate::error::{Error, Result};
use crate::network::spec::{HeadKind, VariantSpec, NUM_STAGES};
use crate::params::{BatchNorm, InitScheme, LayerNorm, Linear, ParamBuilder, ParamId, ParamStore, Session, WeightInit};
use crate::positional::{sinusoidal_2d, CodeRole, LearnableCodes, StageCodes};
use crate::tensor::{Scalar, Var};

/// Smallest accepted input side.
pub const MIN_INPUT_SIDE: usize = 32;
const IMAGE_CHANNELS: usize = 3;
const STEM_KERNEL: usize = 7;

/// 7×7 stride-2 convolution, channel layer norm, GELU, 3×3 stride-2 max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stem {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub norm: LayerNorm,
}

/// Separable convolution for the whole map plus the part-side transition
/// into the stage's width and part count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEmbed {
    pub stride: usize,
    pub depthwise_weight: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise_weight: ParamId,
    pub pointwise_bias: ParamId,
    pub norm: LayerNorm,
    /// `C_{s−1} → C_s` on parts; absent in the first stage.
    pub part_align: Option<Linear>,
    /// `N_s × N_{s−1}` mixing along the part axis (weight, `[N_s, 1]` bias);
    /// present only when the part count changes.
    pub part_resample: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockWeights {
    pub encoder: EncoderWeights,
    pub decoder: DecoderWeights,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageWeights {
    pub embed: PatchEmbed,
    pub codes: StageCodes,
    pub blocks: Vec<BlockWeights>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadWeights {
    Parts {
        encoder: EncoderWeights,
        classifier: Linear,
    },
    Wholes {
        linear: Linear,
        norm: BatchNorm,
        classifier: Linear,
    },
}

/// Encoder affinity of one block, with the geometry needed to map each part
/// row back onto the whole grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockAffinity {
    /// 0-based over all blocks; the parts-head encoder comes last.
    pub index: usize,
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    pub parts: usize,
    pub affinity: AffinityTensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, classes]`.
    pub logits: Var,
    pub affinities: Vec<BlockAffinity>,
    /// Per block, `[B, G, L, N]`.
    pub global_attention: Vec<Var>,
    /// Per block, `[B, N_p, G, k², k²]`.
    pub local_attention: Vec<Var>,
    pub parts: PartState,
    pub whole: WholeState,
}

/// A built network: its specification, parameter store and the handles
/// that tie the store to the computation.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: VariantSpec,
    pub params: ParamStore<T>,
    pub stem: Stem,
    pub prototype: ParamId,
    pub stages: Vec<StageWeights>,
    pub head: HeadWeights,
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: VariantSpec, seed: u64, scheme: InitScheme) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut b = ParamBuilder::new(&mut params, seed, scheme);

        b.push_scope("stem");
        let stem = Stem {
            conv_weight: b.weight(
                "conv.weight",
                &[spec.stem_width, IMAGE_CHANNELS, STEM_KERNEL, STEM_KERNEL],
                WeightInit::FanIn(IMAGE_CHANNELS * STEM_KERNEL * STEM_KERNEL),
            ),
            conv_bias: b.bias("conv.bias", &[spec.stem_width]),
            norm: b.norm("norm", spec.stem_width),
        };
        b.pop_scope();
        let prototype = b.code("prototype", &[spec.parts[0], spec.channels[0]]);

        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let (c, n) = (spec.channels[s], spec.parts[s]);
            let (c_in, n_in) = if s == 0 {
                (spec.stem_width, n)
            } else {
                (spec.channels[s - 1], spec.parts[s - 1])
            };
            b.push_scope(format!("stages.{s}"));
            b.push_scope("embed");
            let embed = PatchEmbed {
                stride: if s == 0 { 1 } else { 2 },
                depthwise_weight: b.weight("dw.weight", &[c_in, 1, 3, 3], WeightInit::FanIn(9)),
                depthwise_bias: b.bias("dw.bias", &[c_in]),
                pointwise_weight: b.weight("pw.weight", &[c, c_in, 1, 1], WeightInit::FanIn(c_in)),
                pointwise_bias: b.bias("pw.bias", &[c]),
                norm: b.norm("norm", c),
                part_align: (s > 0).then(|| b.linear("part_align", c_in, c, WeightInit::TruncNormal)),
                part_resample: (s > 0 && n != n_in).then(|| {
                    (
                        b.weight("part_resample.weight", &[n, n_in], WeightInit::TruncNormal),
                        b.bias("part_resample.bias", &[n, 1]),
                    )
                }),
            };
            b.pop_scope();
            let codes = StageCodes {
                encoder: LearnableCodes::new(&mut b, "codes.encoder", CodeRole::EncoderPart, s, n, c),
                decoder: LearnableCodes::new(&mut b, "codes.decoder", CodeRole::DecoderPart, s, n, c),
            };
            let mut blocks = Vec::with_capacity(spec.blocks[s]);
            for i in 0..spec.blocks[s] {
                b.push_scope(format!("blocks.{i}"));
                blocks.push(BlockWeights {
                    encoder: EncoderWeights::new(&mut b, "encoder", n, c, true),
                    decoder: DecoderWeights::new(&mut b, "decoder", c, spec.heads[s], spec.windows[s])?,
                });
                b.pop_scope();
            }
            b.pop_scope();
            stages.push(StageWeights { embed, codes, blocks });
        }

        let (c, n) = (spec.channels[NUM_STAGES - 1], spec.parts[NUM_STAGES - 1]);
        b.push_scope("head");
        let head = match spec.head {
            HeadKind::Parts => HeadWeights::Parts {
                encoder: EncoderWeights::new(&mut b, "encoder", n, c, false),
                classifier: b.linear("classifier", c, spec.num_classes, WeightInit::TruncNormal),
            },
            HeadKind::Wholes => HeadWeights::Wholes {
                linear: b.linear("linear", c, c, WeightInit::TruncNormal),
                norm: b.batch_norm("norm", c),
                classifier: b.linear("classifier", c, spec.num_classes, WeightInit::TruncNormal),
            },
        };
        b.pop_scope();

        Ok(Self {
            spec,
            params,
            stem,
            prototype,
            stages,
            head,
        })
    }

    pub fn from_name(name: &str, seed: u64) -> Result<Self> {
        Self::new(VariantSpec::from_name(name)?, seed, InitScheme::Standard)
    }

    /// Number of learnable scalars in the store (running statistics excluded).
    pub fn num_parameters(&self) -> usize {
        self.params.count_trainable()
    }

    /// Stem: `[B, 3, H, W]` → `[B, stem_width, H/4, W/4]` (NCHW).
    pub fn stem_forward(&self, s: &mut Session<'_, T>, images: Var) -> Result<Var> {
        let w = s.param(self.stem.conv_weight);
        let bias = s.param(self.stem.conv_bias);
        let y = s.tape.conv2d(images, w, Some(bias), 2, 3, 1)?;
        let y = s.tape.permute(y, &[0, 2, 3, 1])?;
        let y = s.layer_norm(y, &self.stem.norm)?;
        let y = s.tape.gelu(y);
        let y = s.tape.permute(y, &[0, 3, 1, 2])?;
        s.tape.maxpool2d(y, 3, 2, 1)
    }

    /// Enters stage `stage`: separable convolution on the NCHW map `x`, and
    /// width/count alignment of the incoming parts (`None` in the first
    /// stage, which starts from the learned prototype).
    pub fn patch_embed(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        parts: Option<&PartState>,
        stage: usize,
    ) -> Result<(WholeState, PartState)> {
        let st = self
            .stages
            .get(stage)
            .ok_or_else(|| Error::Index(format!("stage {stage} of {NUM_STAGES}")))?;
        let e = &st.embed;
        let c_in = s.tape.shape(x)[1];
        let dw = s.param(e.depthwise_weight);
        let db = s.param(e.depthwise_bias);
        let y = s.tape.conv2d(x, dw, Some(db), e.stride, 1, c_in)?;
        let pw = s.param(e.pointwise_weight);
        let pb = s.param(e.pointwise_bias);
        let y = s.tape.conv2d(y, pw, Some(pb), 1, 0, 1)?;
        let [batch, c, h, w] = s.tape.shape(y)[..] else {
            return Err(Error::dim("patch_embed", "expected an NCHW map"));
        };
        let y = s.tape.permute(y, &[0, 2, 3, 1])?;
        let y = s.tape.reshape(y, &[batch, h * w, c])?;
        let values = s.layer_norm(y, &e.norm)?;
        let whole = WholeState {
            values,
            height: h,
            width: w,
            stage,
        };

        let p = match parts {
            None => {
                let proto = s.param(self.prototype);
                s.tape.expand(proto, batch)
            }
            Some(prev) => {
                let mut p = prev.values;
                if let Some(align) = &e.part_align {
                    p = s.linear(p, align)?;
                }
                if let Some((wr, br)) = e.part_resample {
                    let wr = s.param(wr);
                    let br = s.param(br);
                    p = s.tape.matmul(wr, p)?;
                    p = s.tape.add(p, br)?;
                }
                p
            }
        };
        let block = parts.map_or(0, |p| p.block);
        Ok((whole, PartState { values: p, stage, block }))
    }

    /// Full forward pass. `drop_path_max` is the stochastic-depth rate of the
    /// deepest block; rates grow linearly from zero and only apply in
    /// training sessions.
    pub fn forward(&self, s: &mut Session<'_, T>, images: Var, drop_path_max: f64) -> Result<ForwardOutput> {
        let shape = s.tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != IMAGE_CHANNELS {
            return Err(Error::dim("forward", format!("expected [B, 3, H, W] images, got {shape:?}")));
        }
        if shape[2] < MIN_INPUT_SIDE || shape[3] < MIN_INPUT_SIDE {
            return Err(Error::dim(
                "forward",
                format!(
                    "input {}x{} too small for the stem; need at least {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}",
                    shape[2], shape[3]
                ),
            ));
        }
        let rates = self.spec.drop_path_rates(drop_path_max);
        let mut x = self.stem_forward(s, images)?;
        let mut parts: Option<PartState> = None;
        let mut whole: Option<WholeState> = None;
        let mut out = ForwardOutput {
            logits: images,
            affinities: Vec::new(),
            global_attention: Vec::new(),
            local_attention: Vec::new(),
            parts: PartState {
                values: images,
                stage: 0,
                block: 0,
            },
            whole: WholeState {
                values: images,
                height: 0,
                width: 0,
                stage: 0,
            },
        };
        let mut index = 0;
        for (si, st) in self.stages.iter().enumerate() {
            let heads = self.spec.heads[si];
            let (mut xs, mut ps) = self.patch_embed(s, x, parts.as_ref(), si)?;
            let grid = sinusoidal_2d::<T>(xs.height, xs.width, self.spec.channels[si])?;
            let dw = s.constant(grid.values);
            let enc = EncoderCodes {
                parts: s.param(st.codes.encoder.values),
                whole: dw,
            };
            let dec = DecoderCodes {
                whole: dw,
                parts: s.param(st.codes.decoder.values),
            };
            for bw in &st.blocks {
                let rate = rates[index];
                let (p_next, aff) = encode(s, &ps, &xs, &enc, &bw.encoder, heads, rate)?;
                out.affinities.push(BlockAffinity {
                    index,
                    stage: si,
                    height: xs.height,
                    width: xs.width,
                    parts: self.spec.parts[si],
                    affinity: aff,
                });
                let (xg, ga) = global_decode(s, &xs, &p_next, &dec, &bw.decoder, heads, rate)?;
                out.global_attention.push(ga);
                let local = local_attention(s, &xg, &bw.decoder, heads, rate)?;
                out.local_attention.push(local.attention);
                ps = p_next;
                xs = local.whole;
                index += 1;
            }
            let [b, _, c] = s.tape.shape(xs.values)[..] else {
                return Err(Error::dim("forward", "whole state must be [B, L, C]"));
            };
            let nhwc = s.tape.reshape(xs.values, &[b, xs.height, xs.width, c])?;
            x = s.tape.permute(nhwc, &[0, 3, 1, 2])?;
            parts = Some(ps);
            whole = Some(xs);
        }
        let (ps, xs) = match (parts, whole) {
            (Some(p), Some(x)) => (p, x),
            _ => return Err(Error::Graph("network has no stages".into())),
        };

        let last = NUM_STAGES - 1;
        out.logits = match &self.head {
            HeadWeights::Parts { encoder, classifier } => {
                let grid = sinusoidal_2d::<T>(xs.height, xs.width, self.spec.channels[last])?;
                let codes = EncoderCodes {
                    parts: s.param(self.stages[last].codes.encoder.values),
                    whole: s.constant(grid.values),
                };
                let (p_final, aff) = encode(s, &ps, &xs, &codes, encoder, self.spec.heads[last], 0.0)?;
                out.affinities.push(BlockAffinity {
                    index,
                    stage: last,
                    height: xs.height,
                    width: xs.width,
                    parts: self.spec.parts[last],
                    affinity: aff,
                });
                out.parts = p_final;
                let pooled = s.tape.mean_dim(p_final.values, 1)?;
                s.linear(pooled, classifier)?
            }
            HeadWeights::Wholes {
                linear,
                norm,
                classifier,
            } => {
                out.parts = ps;
                let y = s.linear(xs.values, linear)?;
                let y = s.batch_norm(y, norm)?;
                let pooled = s.tape.mean_dim(y, 1)?;
                s.linear(pooled, classifier)?
            }
        };
        out.whole = xs;
        Ok(out)
    }
}

impl VariantSpec {
    /// Stochastic-depth rate per block, linear from 0 to `max` over depth.
    pub fn drop_path_rates(&self, max: f64) -> Vec<f64> {
        linspace(0.0, max, self.total_blocks())
    }

    /// Stages whose maps need zero-padding to tile into windows at the given
    /// input size, as `(stage, side_h, side_w, window)`.
    pub fn padded_stages(&self, height: usize, width: usize) -> Vec<(usize, usize, usize, usize)> {
        let hs = self.stage_sides(height);
        let ws = self.stage_sides(width);
        (0..NUM_STAGES)
            .filter(|&s| !hs[s].is_multiple_of(self.windows[s]) || !ws[s].is_multiple_of(self.windows[s]))
            .map(|s| (s, hs[s], ws[s], self.windows[s]))
            .collect()
    }
}

/// `n` evenly spaced values from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}
