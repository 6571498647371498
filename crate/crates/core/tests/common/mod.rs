//! Scalar-loop reference implementations shared by the integration tests.
//!
//! Everything here works on plain `Vec<Vec<f64>>` rows (one sample at a
//! time) and reads weights straight out of a parameter store, so it shares
//! no code path with the tape-based network.
#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vip::attention::{AttentionWeights, SelfAttentionWeights};
use vip::decoder::DecoderWeights;
use vip::encoder::EncoderWeights;
use vip::network::{HeadWeights, Model, NUM_STAGES};
use vip::params::{LayerNorm, Linear, Mlp, ParamId, ParamStore};
use vip::tensor::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub const LN_EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Rows {
    (0..n).map(|_| (0..c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).collect()
}

pub fn rows_to_tensor(rows: &[Rows]) -> Tensor<f64> {
    let (b, n, c) = (rows.len(), rows[0].len(), rows[0][0].len());
    let flat: Vec<f64> = rows.iter().flatten().flatten().copied().collect();
    Tensor::new(&[b, n, c], flat).unwrap()
}

pub fn single_to_tensor(rows: &Rows) -> Tensor<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(&[rows.len(), rows[0].len()], flat).unwrap()
}

/// Splits `[B, N, C]` into per-sample rows.
pub fn tensor_to_rows(t: &Tensor<f64>) -> Vec<Rows> {
    let [b, n, c] = t.shape()[..] else { panic!("expected rank 3, got {:?}", t.shape()) };
    (0..b)
        .map(|s| (0..n).map(|i| t.data()[(s * n + i) * c..(s * n + i + 1) * c].to_vec()).collect())
        .collect()
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(u, v)| (u - v).abs())
        })
        .fold(0.0, f64::max)
}

fn vals(store: &ParamStore<f64>, id: ParamId) -> &[f64] {
    store.get(id).data()
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn layer_norm(rows: &Rows, n: &LayerNorm, store: &ParamStore<f64>) -> Rows {
    let (g, b) = (vals(store, n.gamma), vals(store, n.beta));
    rows.iter()
        .map(|r| {
            let c = r.len() as f64;
            let mean = r.iter().sum::<f64>() / c;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

/// `y = x·W + b` with `W` stored `[in, out]`.
pub fn linear(rows: &Rows, l: &Linear, store: &ParamStore<f64>) -> Rows {
    let w = store.get(l.weight);
    let (input, output) = (w.shape()[0], w.shape()[1]);
    let (w, b) = (w.data(), vals(store, l.bias));
    rows.iter()
        .map(|r| {
            assert_eq!(r.len(), input);
            (0..output)
                .map(|o| b[o] + (0..input).map(|i| r[i] * w[i * output + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_rows(rows: &Rows) -> Rows {
    rows.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect()
}

/// MLP branch `fc2(gelu(fc1(LN(x))))`.
pub fn mlp(rows: &Rows, m: &Mlp, store: &ParamStore<f64>) -> Rows {
    let h = layer_norm(rows, &m.norm, store);
    let h = gelu_rows(&linear(&h, &m.fc1, store));
    linear(&h, &m.fc2, store)
}

/// Softmax over the entries whose flag is set; the others get weight 0.
pub fn masked_softmax(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .zip(keep)
        .map(|(&v, &k)| if k { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Multi-head attention written as loops. `extra(g, a, b)` is added to the
/// raw dot product before scaling; `keep(a, b)` restricts the keys.
/// Returns heads concatenated `[queries][C]` and weights `[G][queries][keys]`.
pub fn attend(
    q: &Rows,
    k: &Rows,
    v: &Rows,
    heads: usize,
    extra: impl Fn(usize, usize, usize) -> f64,
    keep: impl Fn(usize, usize) -> bool,
) -> (Rows, Vec<Rows>) {
    let c = q[0].len();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; c]; q.len()];
    let mut weights = vec![vec![vec![0.0; k.len()]; q.len()]; heads];
    for g in 0..heads {
        for a in 0..q.len() {
            let logits: Vec<f64> = (0..k.len())
                .map(|b| {
                    let dot: f64 = (0..d).map(|j| q[a][g * d + j] * k[b][g * d + j]).sum();
                    (dot + extra(g, a, b)) * scale
                })
                .collect();
            let mask: Vec<bool> = (0..k.len()).map(|b| keep(a, b)).collect();
            let w = masked_softmax(&logits, &mask);
            for (b, &wb) in w.iter().enumerate() {
                for j in 0..d {
                    out[a][g * d + j] += wb * v[b][g * d + j];
                }
            }
            weights[g][a] = w;
        }
    }
    (out, weights)
}

/// Attention with separate query/key/value norms and an output projection.
pub fn cross_attention(
    queries: &Rows,
    query_code: &Rows,
    keys: &Rows,
    key_code: &Rows,
    w: &AttentionWeights,
    heads: usize,
    store: &ParamStore<f64>,
) -> (Rows, Vec<Rows>) {
    let q = linear(&layer_norm(&add(queries, query_code), &w.norm_q, store), &w.q, store);
    let k = linear(&layer_norm(&add(keys, key_code), &w.norm_k, store), &w.k, store);
    let v = linear(&layer_norm(keys, &w.norm_v, store), &w.v, store);
    let (o, weights) = attend(&q, &k, &v, heads, |_, _, _| 0.0, |_, _| true);
    (linear(&o, &w.proj, store), weights)
}

/// One encoder pass on one sample: returns the new parts and the
/// `[G][N][L]` affinity.
pub fn encoder(
    p: &Rows,
    x: &Rows,
    d_e: &Rows,
    d_w: &Rows,
    w: &EncoderWeights,
    heads: usize,
    store: &ParamStore<f64>,
) -> (Rows, Vec<Rows>) {
    let (attended, aff) = cross_attention(p, d_e, x, d_w, &w.attn, heads, store);
    let p_hat = add(p, &attended);
    let h = layer_norm(&p_hat, &w.reasoning.norm, store);
    let n = p.len();
    let wp = vals(store, w.reasoning.weight);
    let bp = vals(store, w.reasoning.bias);
    let mixed: Rows = (0..n)
        .map(|i| {
            (0..h[0].len())
                .map(|c| (0..n).map(|m| wp[i * n + m] * h[m][c]).sum::<f64>() + bp[i])
                .collect()
        })
        .collect();
    let p_r = add(&p_hat, &mixed);
    let out = match &w.mlp {
        Some(m) => add(&p_r, &mlp(&p_r, m, store)),
        None => gelu_rows(&p_r),
    };
    (out, aff)
}

/// Global decode on one sample: pixels attend over parts, then the MLP.
pub fn global_decode(
    x: &Rows,
    p: &Rows,
    d_w: &Rows,
    d_d: &Rows,
    w: &DecoderWeights,
    heads: usize,
    store: &ParamStore<f64>,
) -> Rows {
    let (attended, _) = cross_attention(x, d_w, p, d_d, &w.global, heads, store);
    let xg = add(x, &attended);
    add(&xg, &mlp(&xg, &w.global_mlp, store))
}

/// Windowed self-attention over a map of the given width (rows in raster
/// order) with relative logits, evaluated per query by enumerating the real
/// pixels of its window. Returns `(output, pre-MLP)`.
pub fn local_attention(
    x: &Rows,
    width: usize,
    w: &DecoderWeights,
    heads: usize,
    store: &ParamStore<f64>,
) -> (Rows, Rows) {
    let a: &SelfAttentionWeights = &w.local;
    let k = w.rel.window;
    let c = x[0].len();
    let d = c / heads;
    let half = d / 2;
    let table_w = c / 2;
    let rh = vals(store, w.rel.height);
    let rw = vals(store, w.rel.width);
    let h = layer_norm(x, &a.norm, store);
    let q = linear(&h, &a.q, store);
    let kk = linear(&h, &a.k, store);
    let v = linear(&h, &a.v, store);
    let pos = |i: usize| (i / width, i % width);
    let extra = |g: usize, qa: usize, kb: usize| {
        let (ay, ax) = pos(qa);
        let (by, bx) = pos(kb);
        let dy = (by % k) + k - 1 - (ay % k);
        let dx = (bx % k) + k - 1 - (ax % k);
        (0..half)
            .map(|j| q[qa][g * d + j] * rh[dy * table_w + g * half + j])
            .sum::<f64>()
            + (0..half)
                .map(|j| q[qa][g * d + half + j] * rw[dx * table_w + g * half + j])
                .sum::<f64>()
    };
    let same_window = |qa: usize, kb: usize| {
        let (ay, ax) = pos(qa);
        let (by, bx) = pos(kb);
        ay / k == by / k && ax / k == bx / k
    };
    let (o, _) = attend(&q, &kk, &v, heads, extra, same_window);
    let xl = add(x, &linear(&o, &a.proj, store));
    let out = add(&xl, &mlp(&xl, &w.local_mlp, store));
    (out, xl)
}

/// 2-D sine/cosine grid: row position in the first half of the channels,
/// column in the second; even channels sine, odd cosine.
pub fn sinusoid(height: usize, width: usize, c: usize) -> Rows {
    let half = c / 2;
    let enc = |pos: f64, i: usize| {
        let f = 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
        if i.is_multiple_of(2) {
            (pos / f).sin()
        } else {
            (pos / f).cos()
        }
    };
    (0..height * width)
        .map(|p| {
            let (y, x) = ((p / width) as f64, (p % width) as f64);
            (0..c).map(|ch| if ch < half { enc(y, ch) } else { enc(x, ch - half) }).collect()
        })
        .collect()
}

/// Channel-major feature map `[C][H][W]`.
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn at(&self, c: usize, y: isize, x: isize) -> Option<f64> {
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
            .then(|| self.v[(c * self.h + y as usize) * self.w + x as usize])
    }

    /// Raster-order pixel rows `[H·W][C]`.
    pub fn to_rows(&self) -> Rows {
        (0..self.h * self.w)
            .map(|p| (0..self.c).map(|ch| self.v[ch * self.h * self.w + p]).collect())
            .collect()
    }

    pub fn from_rows(rows: &Rows, h: usize, w: usize) -> Self {
        let c = rows[0].len();
        let mut v = vec![0.0; c * h * w];
        for (p, r) in rows.iter().enumerate() {
            for (ch, &val) in r.iter().enumerate() {
                v[ch * h * w + p] = val;
            }
        }
        Self { c, h, w, v }
    }
}

/// Grouped cross-correlation with OIHW weights.
pub fn conv(x: &Map, weight: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize, groups: usize) -> Map {
    let [cout, cpg, kh, kw] = weight.shape()[..] else { panic!("OIHW weight") };
    let oh = (x.h + 2 * pad - kh) / stride + 1;
    let ow = (x.w + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    let mut v = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let g = o / opg;
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias[o];
                for ci in 0..cpg {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (xx * stride + j) as isize - pad as isize;
                            if let Some(val) = x.at(g * cpg + ci, iy, ix) {
                                acc += val * weight.at(&[o, ci, i, j]);
                            }
                        }
                    }
                }
                v[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    Map { c: cout, h: oh, w: ow, v }
}

pub fn maxpool(x: &Map, k: usize, stride: usize, pad: usize) -> Map {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut v = vec![0.0; x.c * oh * ow];
    for c in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for i in 0..k {
                    for j in 0..k {
                        let iy = (y * stride + i) as isize - pad as isize;
                        let ix = (xx * stride + j) as isize - pad as isize;
                        if let Some(val) = x.at(c, iy, ix) {
                            best = best.max(val);
                        }
                    }
                }
                v[(c * oh + y) * ow + xx] = best;
            }
        }
    }
    Map { c: x.c, h: oh, w: ow, v }
}

fn table(store: &ParamStore<f64>, id: ParamId) -> Rows {
    let t = store.get(id);
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

/// Straight-line forward of a whole network on one `[3][H][W]` image,
/// built only from the loops above. Returns the logits.
pub fn network_forward(model: &Model<f64>, image: &Map) -> Vec<f64> {
    let st = &model.params;
    let spec = &model.spec;
    let stem = &model.stem;
    let y = conv(image, st.get(stem.conv_weight), vals(st, stem.conv_bias), 2, 3, 1);
    let rows = gelu_rows(&layer_norm(&y.to_rows(), &stem.norm, st));
    let mut map = maxpool(&Map::from_rows(&rows, y.h, y.w), 3, 2, 1);

    let mut parts = table(st, model.prototype);
    let mut whole: Rows = Vec::new();
    for (s, stage) in model.stages.iter().enumerate() {
        let e = &stage.embed;
        let dw = conv(&map, st.get(e.depthwise_weight), vals(st, e.depthwise_bias), e.stride, 1, map.c);
        let pw = conv(&dw, st.get(e.pointwise_weight), vals(st, e.pointwise_bias), 1, 0, 1);
        let (h, w) = (pw.h, pw.w);
        whole = layer_norm(&pw.to_rows(), &e.norm, st);
        if let Some(align) = &e.part_align {
            parts = linear(&parts, align, st);
        }
        if let Some((wr, br)) = e.part_resample {
            let wt = st.get(wr);
            let (n, n_in) = (wt.shape()[0], wt.shape()[1]);
            let bias = vals(st, br);
            parts = (0..n)
                .map(|i| {
                    (0..parts[0].len())
                        .map(|c| (0..n_in).map(|m| wt.data()[i * n_in + m] * parts[m][c]).sum::<f64>() + bias[i])
                        .collect()
                })
                .collect();
        }
        let d_w = sinusoid(h, w, spec.channels[s]);
        let d_e = table(st, stage.codes.encoder.values);
        let d_d = table(st, stage.codes.decoder.values);
        let heads = spec.heads[s];
        for b in &stage.blocks {
            let (p_next, _) = encoder(&parts, &whole, &d_e, &d_w, &b.encoder, heads, st);
            let xg = global_decode(&whole, &p_next, &d_w, &d_d, &b.decoder, heads, st);
            let (xl, _) = local_attention(&xg, w, &b.decoder, heads, st);
            parts = p_next;
            whole = xl;
        }
        map = Map::from_rows(&whole, h, w);
    }

    let last = NUM_STAGES - 1;
    let HeadWeights::Parts { encoder: enc, classifier } = &model.head else {
        panic!("the composed oracle covers the parts head");
    };
    let d_w = sinusoid(map.h, map.w, spec.channels[last]);
    let d_e = table(st, model.stages[last].codes.encoder.values);
    let (p, _) = encoder(&parts, &whole, &d_e, &d_w, enc, spec.heads[last], st);
    let mean: Vec<f64> = (0..p[0].len())
        .map(|c| p.iter().map(|r| r[c]).sum::<f64>() / p.len() as f64)
        .collect();
    linear(&vec![mean], classifier, st).remove(0)
}
