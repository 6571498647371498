//! Measured property and oracle suites, shared by the focused test files
//! and the acceptance report. Each returns the worst deviation it saw so
//! callers decide the pass bar.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

use rand::seq::SliceRandom;
use rand::Rng;
use vip::decoder::{global_decode, local_attention, merge_tensor, partition_tensor, DecoderCodes, DecoderWeights, PatchLayout};
use vip::encoder::{encode, EncoderCodes, EncoderWeights, PartState, WholeState};
use vip::network::{HeadWeights, Model, VariantSpec};
use vip::params::{InitScheme, Mode, ParamBuilder, ParamId, ParamStore, Session};
use vip::tensor::Tensor;

use super::*;

pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    // Keep drawing until the permutation actually moves something.
    let mut r = rng(seed);
    while n > 1 && p.iter().enumerate().all(|(i, &v)| i == v) {
        p.shuffle(&mut r);
    }
    p
}

/// Rows `perm[i]` of a `[n, ...]` tensor become row `i`.
pub fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let row = t.numel() / t.shape()[0];
    let data = perm.iter().flat_map(|&src| t.data()[src * row..(src + 1) * row].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

/// `P·W·Pᵀ` for a square `[n, n]` matrix.
pub fn conjugate(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let n = perm.len();
    Tensor::from_fn(&[n, n], |i| t.at(&[perm[i / n], perm[i % n]]))
}

fn permute_param(store: &mut ParamStore<f64>, id: ParamId, perm: &[usize]) {
    let v = permute_rows(store.get(id), perm);
    store.set(id, v).unwrap();
}

fn conjugate_param(store: &mut ParamStore<f64>, id: ParamId, perm: &[usize]) {
    let v = conjugate(store.get(id), perm);
    store.set(id, v).unwrap();
}

/// Softmax-row statistics over many random Nano forwards.
#[derive(Debug, Default)]
pub struct RowReport {
    pub forwards: usize,
    pub rows: usize,
    /// Largest `|Σ row − 1|`.
    pub worst_sum: f64,
    /// Entries outside `[0, 1]`.
    pub out_of_range: usize,
    /// Largest weight on a zero-padded local key.
    pub worst_padded: f64,
    pub padded_keys: usize,
}

impl RowReport {
    fn rows(&mut self, t: &Tensor<f64>) {
        let len = *t.shape().last().unwrap();
        for row in t.data().chunks(len) {
            self.rows += 1;
            self.out_of_range += row.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
            self.worst_sum = self.worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
}

/// Affinity, global-decode and local-attention rows of `forwards` random
/// Nano forwards at assorted input sides (some of which pad windows).
pub fn softmax_rows(forwards: u64) -> RowReport {
    let spec = VariantSpec::from_name("vip-nano").unwrap();
    let mut report = RowReport::default();
    for i in 0..forwards {
        let model = Model::<f64>::new(spec.clone(), i, InitScheme::Dense { std: 0.3 }).unwrap();
        let side = [32, 40, 48, 36][i as usize % 4];
        let mut r = rng(1000 + i);
        let images = Tensor::from_fn(&[2, 3, side, side], |_| r.random::<f64>() * 2.0 - 1.0);
        let mut s = Session::new(&model.params, Mode::Eval, 0);
        let x = s.constant(images);
        let out = model.forward(&mut s, x, 0.0).unwrap();
        report.forwards += 1;
        for a in &out.affinities {
            report.rows(s.tape.value(a.affinity.weights));
        }
        for g in &out.global_attention {
            report.rows(s.tape.value(*g));
        }
        let sides = spec.stage_sides(side);
        for (block, l) in out.local_attention.iter().enumerate() {
            let w = s.tape.value(*l);
            report.rows(w);
            let layout = PatchLayout::new(sides[block], sides[block], spec.windows[block]).unwrap();
            if !layout.is_padded() {
                continue;
            }
            let [_, np, _, k2, _] = w.shape()[..] else { panic!("local weights rank") };
            for (idx, &v) in w.data().iter().enumerate() {
                let key = idx % k2;
                let patch = (idx / (k2 * k2 * spec.heads[block])) % np;
                if layout.source(patch, key).is_none() {
                    report.worst_padded = report.worst_padded.max(v);
                    report.padded_keys += 1;
                }
            }
        }
    }
    report
}

fn block_setup(seed: u64, parts: usize, channels: usize) -> (ParamStore<f64>, EncoderWeights, DecoderWeights) {
    let mut store = ParamStore::new();
    let (enc, dec) = {
        let mut b = ParamBuilder::new(&mut store, seed, InitScheme::Dense { std: 0.5 });
        (
            EncoderWeights::new(&mut b, "enc", parts, channels, true),
            DecoderWeights::new(&mut b, "dec", channels, 2, 2).unwrap(),
        )
    };
    (store, enc, dec)
}

/// Permuting the input parts, their codes and the part-mixing weights
/// (`P·W·Pᵀ`, `P·b`) permutes the encoder's parts and affinity rows the
/// same way. Returns the largest deviation from that.
pub fn encoder_equivariance(seeds: u64) -> f64 {
    let (n, c, l) = (6, 8, 10);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let (store, enc, _) = block_setup(seed, n, c);
        let mut r = rng(seed + 50);
        let p = rows_to_tensor(&[rand_rows(&mut r, n, c), rand_rows(&mut r, n, c)]);
        let x = rows_to_tensor(&[rand_rows(&mut r, l, c), rand_rows(&mut r, l, c)]);
        let d_e = single_to_tensor(&rand_rows(&mut r, n, c));
        let d_w = single_to_tensor(&rand_rows(&mut r, l, c));
        let perm = permutation(n, seed);

        let run = |store: &ParamStore<f64>, p: &Tensor<f64>, d_e: &Tensor<f64>| {
            let mut s = Session::new(store, Mode::Eval, 0);
            let ps = PartState { values: s.constant(p.clone()), stage: 0, block: 0 };
            let xs = WholeState { values: s.constant(x.clone()), height: 2, width: 5, stage: 0 };
            let codes = EncoderCodes { parts: s.constant(d_e.clone()), whole: s.constant(d_w.clone()) };
            let (out, aff) = encode(&mut s, &ps, &xs, &codes, &enc, 2, 0.0).unwrap();
            (s.tape.value(out.values).clone(), s.tape.value(aff.weights).clone())
        };
        let (base, base_aff) = run(&store, &p, &d_e);

        let mut permuted = store.clone();
        conjugate_param(&mut permuted, enc.reasoning.weight, &perm);
        permute_param(&mut permuted, enc.reasoning.bias, &perm);
        let p_perm = Tensor::from_fn(p.shape(), |i| {
            let (b, rest) = (i / (n * c), i % (n * c));
            p.at(&[b, perm[rest / c], rest % c])
        });
        let (out, aff) = run(&permuted, &p_perm, &permute_rows(&d_e, &perm));
        for b in 0..2 {
            for i in 0..n {
                for ch in 0..c {
                    worst = worst.max((out.at(&[b, i, ch]) - base.at(&[b, perm[i], ch])).abs());
                }
                for g in 0..2 {
                    for j in 0..l {
                        worst = worst.max((aff.at(&[b, g, i, j]) - base_aff.at(&[b, g, perm[i], j])).abs());
                    }
                }
            }
        }
    }
    worst
}

/// Largest change of the global decode output when the parts and their
/// codes are permuted together.
pub fn decode_invariance(seeds: u64) -> f64 {
    let (n, c, l) = (5, 8, 6);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let (store, _, dec) = block_setup(seed + 10, n, c);
        let mut r = rng(seed + 70);
        let p_rows = rand_rows(&mut r, n, c);
        let d_d = rand_rows(&mut r, n, c);
        let x = rows_to_tensor(&[rand_rows(&mut r, l, c)]);
        let d_w = single_to_tensor(&rand_rows(&mut r, l, c));
        let perm = permutation(n, seed + 3);
        let run = |p: &Rows, d_d: &Rows| {
            let mut s = Session::new(&store, Mode::Eval, 0);
            let ps = PartState { values: s.constant(rows_to_tensor(std::slice::from_ref(p))), stage: 0, block: 0 };
            let xs = WholeState { values: s.constant(x.clone()), height: 2, width: 3, stage: 0 };
            let codes = DecoderCodes { whole: s.constant(d_w.clone()), parts: s.constant(single_to_tensor(d_d)) };
            let (out, _) = global_decode(&mut s, &xs, &ps, &codes, &dec, 2, 0.0).unwrap();
            s.tape.value(out.values).clone()
        };
        let base = run(&p_rows, &d_d);
        let reorder = |rows: &Rows| perm.iter().map(|&i| rows[i].clone()).collect::<Rows>();
        worst = worst.max(base.max_abs_diff(&run(&reorder(&p_rows), &reorder(&d_d))));
    }
    worst
}

/// Parts-head Nano logits before and after permuting every part-indexed
/// parameter (prototype, codes, mixing weights) consistently. Returns the
/// largest logit change and the largest logit magnitude.
pub fn logits_invariance() -> (f64, f64) {
    let spec = VariantSpec::from_name("vip-nano").unwrap();
    let model = Model::<f64>::new(spec, 21, InitScheme::Dense { std: 0.3 }).unwrap();
    let n = model.spec.parts[0];
    assert!(model.spec.parts.iter().all(|&p| p == n));
    let perm = permutation(n, 4);

    let mut permuted = model.clone();
    let st = &mut permuted.params;
    permute_param(st, model.prototype, &perm);
    let mut encoders = Vec::new();
    for stage in &model.stages {
        permute_param(st, stage.codes.encoder.values, &perm);
        permute_param(st, stage.codes.decoder.values, &perm);
        encoders.extend(stage.blocks.iter().map(|b| b.encoder));
    }
    if let HeadWeights::Parts { encoder, .. } = &model.head {
        encoders.push(*encoder);
    }
    for e in encoders {
        conjugate_param(st, e.reasoning.weight, &perm);
        permute_param(st, e.reasoning.bias, &perm);
    }

    let mut r = rng(22);
    let images = Tensor::from_fn(&[2, 3, 40, 40], |_| r.random::<f64>() * 2.0 - 1.0);
    let logits = |m: &Model<f64>| {
        let mut s = Session::new(&m.params, Mode::Eval, 0);
        let x = s.constant(images.clone());
        let out = m.forward(&mut s, x, 0.0).unwrap();
        s.tape.value(out.logits).clone()
    };
    let (a, b) = (logits(&model), logits(&permuted));
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (a.max_abs_diff(&b), scale)
}

/// Partition/merge round trips over every `h, w ≤ 9`, `k ≤ 4`. Returns the
/// number of geometries checked, the padded ones among them, and the
/// failures (a non-identical round trip or a non-zero padded slot).
pub fn partition_round_trips() -> (usize, usize, Vec<String>) {
    let mut r = rng(30);
    let (mut cases, mut padded, mut failures) = (0, 0, Vec::new());
    for h in 1..=9 {
        for w in 1..=9 {
            for k in 1..=4 {
                let layout = PatchLayout::new(h, w, k).unwrap();
                // Strictly positive entries, so zeros can only be padding.
                let x = Tensor::from_fn(&[2, h * w, 3], |_| 1.0 + r.random::<f64>());
                let p = partition_tensor(&x, &layout).unwrap();
                cases += 1;
                padded += usize::from(layout.is_padded());
                if p.shape() != [2, layout.num_patches(), k * k, 3] {
                    failures.push(format!("({h},{w},{k}): shape {:?}", p.shape()));
                    continue;
                }
                if merge_tensor(&p, &layout).unwrap() != x {
                    failures.push(format!("({h},{w},{k}): merge differs"));
                }
                if p.data().iter().filter(|&&v| v != 0.0).count() != x.numel() {
                    failures.push(format!("({h},{w},{k}): padded slots are not zero"));
                }
            }
        }
    }
    (cases, padded, failures)
}

/// Perturbs single pixels of a padded `5×7` map with `3×3` windows and
/// counts pre-MLP outputs that change outside the perturbed pixel's window
/// (should be none) and perturbations that changed nothing inside it
/// (should also be none).
pub fn cross_window_leaks() -> (usize, usize) {
    let (h, w, k, c) = (5, 7, 3, 8);
    let mut store = ParamStore::new();
    let dec = {
        let mut b = ParamBuilder::new(&mut store, 40, InitScheme::Dense { std: 0.5 });
        DecoderWeights::new(&mut b, "dec", c, 2, k).unwrap()
    };
    let mut r = rng(41);
    let base = rand_rows(&mut r, h * w, c);
    let pre = |rows: &Rows| {
        let mut s = Session::new(&store, Mode::Eval, 0);
        let xs = WholeState { values: s.constant(rows_to_tensor(std::slice::from_ref(rows))), height: h, width: w, stage: 0 };
        let out = local_attention(&mut s, &xs, &dec, 2, 0.0).unwrap();
        tensor_to_rows(s.tape.value(out.pre_mlp)).remove(0)
    };
    let before = pre(&base);
    let window = |i: usize| ((i / w) / k, (i % w) / k);
    let (mut leaks, mut inert) = (0, 0);
    for target in 0..h * w {
        let mut moved = base.clone();
        moved[target].iter_mut().for_each(|v| *v += 0.75);
        let after = pre(&moved);
        let mut changed_inside = false;
        for i in 0..h * w {
            if window(i) == window(target) {
                changed_inside |= after[i] != before[i];
            } else if after[i] != before[i] {
                leaks += 1;
            }
        }
        inert += usize::from(!changed_inside);
    }
    (leaks, inert)
}

/// A random small geometry with weights for one encoder and one decoder.
pub struct Instance {
    pub store: ParamStore<f64>,
    pub enc: EncoderWeights,
    pub dec: DecoderWeights,
    pub batch: usize,
    pub parts: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub p: Vec<Rows>,
    pub x: Vec<Rows>,
    pub d_parts: Rows,
    pub d_whole: Rows,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let channels = [4, 8][r.random_range(0..2)];
        let heads = if channels == 4 { [1, 2][r.random_range(0..2)] } else { [1, 2, 4][r.random_range(0..3)] };
        let parts = r.random_range(1..=8);
        let height = r.random_range(1..=4);
        let width = r.random_range(1..=8 / height);
        let window = r.random_range(1..=3);
        let with_mlp = r.random_bool(0.75);
        let mut store = ParamStore::new();
        let (enc, dec) = {
            let mut b = ParamBuilder::new(&mut store, seed, InitScheme::Dense { std: 0.5 });
            (
                EncoderWeights::new(&mut b, "enc", parts, channels, with_mlp),
                DecoderWeights::new(&mut b, "dec", channels, heads, window).unwrap(),
            )
        };
        let batch = 2;
        let l = height * width;
        Self {
            p: (0..batch).map(|_| rand_rows(&mut r, parts, channels)).collect(),
            x: (0..batch).map(|_| rand_rows(&mut r, l, channels)).collect(),
            d_parts: rand_rows(&mut r, parts, channels),
            d_whole: rand_rows(&mut r, l, channels),
            store,
            enc,
            dec,
            batch,
            parts,
            height,
            width,
            heads,
        }
    }

    pub fn states(&self, s: &mut Session<'_, f64>) -> (PartState, WholeState) {
        let p = s.constant(rows_to_tensor(&self.p));
        let x = s.constant(rows_to_tensor(&self.x));
        (
            PartState { values: p, stage: 0, block: 0 },
            WholeState { values: x, height: self.height, width: self.width, stage: 0 },
        )
    }
}

/// Outcome of comparing one module against its scalar-loop oracle.
#[derive(Debug, Default)]
pub struct OracleReport {
    pub instances: usize,
    /// Instances whose window does not tile the map.
    pub padded: usize,
    pub worst: f64,
    /// Read-only inputs that the module modified.
    pub mutated_inputs: usize,
}

/// Encoder block (parts and affinity) on instances `seeds`.
pub fn encoder_oracle(seeds: std::ops::Range<u64>) -> OracleReport {
    let mut rep = OracleReport::default();
    for seed in seeds {
        let inst = Instance::random(seed);
        let mut s = Session::new(&inst.store, Mode::Eval, 0);
        let (p, x) = inst.states(&mut s);
        let codes = EncoderCodes {
            parts: s.constant(single_to_tensor(&inst.d_parts)),
            whole: s.constant(single_to_tensor(&inst.d_whole)),
        };
        let (out, aff) = encode(&mut s, &p, &x, &codes, &inst.enc, inst.heads, 0.0).unwrap();
        let got = tensor_to_rows(s.tape.value(out.values));
        let weights = s.tape.value(aff.weights);
        for b in 0..inst.batch {
            let (want, want_aff) =
                encoder(&inst.p[b], &inst.x[b], &inst.d_parts, &inst.d_whole, &inst.enc, inst.heads, &inst.store);
            rep.worst = rep.worst.max(max_diff(&got[b], &want));
            for (g, rows) in want_aff.iter().enumerate() {
                for (n, row) in rows.iter().enumerate() {
                    for (l, &v) in row.iter().enumerate() {
                        rep.worst = rep.worst.max((weights.at(&[b, g, n, l]) - v).abs());
                    }
                }
            }
        }
        rep.mutated_inputs += usize::from(tensor_to_rows(s.tape.value(x.values)) != inst.x);
        rep.instances += 1;
    }
    rep
}

/// Global decode on instances `seeds`.
pub fn global_decode_oracle(seeds: std::ops::Range<u64>) -> OracleReport {
    let mut rep = OracleReport::default();
    for seed in seeds {
        let inst = Instance::random(seed);
        let mut s = Session::new(&inst.store, Mode::Eval, 0);
        let (p, x) = inst.states(&mut s);
        let codes = DecoderCodes {
            whole: s.constant(single_to_tensor(&inst.d_whole)),
            parts: s.constant(single_to_tensor(&inst.d_parts)),
        };
        let (out, attn) = global_decode(&mut s, &x, &p, &codes, &inst.dec, inst.heads, 0.0).unwrap();
        assert_eq!(s.tape.shape(attn), &[inst.batch, inst.heads, inst.height * inst.width, inst.parts]);
        let got = tensor_to_rows(s.tape.value(out.values));
        for b in 0..inst.batch {
            let want = super::global_decode(
                &inst.x[b],
                &inst.p[b],
                &inst.d_whole,
                &inst.d_parts,
                &inst.dec,
                inst.heads,
                &inst.store,
            );
            rep.worst = rep.worst.max(max_diff(&got[b], &want));
        }
        rep.mutated_inputs += usize::from(tensor_to_rows(s.tape.value(p.values)) != inst.p);
        rep.instances += 1;
    }
    rep
}

/// Local attention (pre- and post-MLP) on instances `seeds`.
pub fn local_attention_oracle(seeds: std::ops::Range<u64>) -> OracleReport {
    let mut rep = OracleReport::default();
    for seed in seeds {
        let inst = Instance::random(seed);
        let k = inst.dec.rel.window;
        rep.padded += usize::from(!inst.height.is_multiple_of(k) || !inst.width.is_multiple_of(k));
        let mut s = Session::new(&inst.store, Mode::Eval, 0);
        let (_, x) = inst.states(&mut s);
        let out = local_attention(&mut s, &x, &inst.dec, inst.heads, 0.0).unwrap();
        let got = tensor_to_rows(s.tape.value(out.whole.values));
        let got_pre = tensor_to_rows(s.tape.value(out.pre_mlp));
        for b in 0..inst.batch {
            let (want, want_pre) = super::local_attention(&inst.x[b], inst.width, &inst.dec, inst.heads, &inst.store);
            rep.worst = rep.worst.max(max_diff(&got_pre[b], &want_pre)).max(max_diff(&got[b], &want));
        }
        rep.instances += 1;
    }
    rep
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub scalars: usize,
    pub tensors_covered: usize,
    pub tensors_total: usize,
    pub worst: f64,
    pub worst_at: String,
    /// Scalars whose exact gradient is zero by construction; these are
    /// compared against an absolute bound instead (see [`shift_invariant`]).
    pub structural_zeros: usize,
    pub failures: Vec<String>,
}

/// Largest central-difference roundoff tolerated on a zero gradient.
pub const FD_NOISE: f64 = 1e-8;

/// Key-side biases add the same offset to every key logit of a query row,
/// which softmax ignores, so their exact gradient is zero and a central
/// difference only measures roundoff.
pub fn shift_invariant(name: &str) -> bool {
    name.ends_with(".k.bias") || name.ends_with(".norm_k.bias")
}

/// Relative error of an analytic derivative against a numeric one.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `grads` (analytic gradients of `loss` for every id in
/// `targets`) with central differences at `h = 1e-5·max(1, |θ|)`.
/// Every target tensor gets `per_tensor` random scalars, and more are drawn
/// until at least `min_total` scalars are checked.
pub fn gradient_check(
    store: &ParamStore<f64>,
    targets: &[ParamId],
    grads: &[Tensor<f64>],
    per_tensor: usize,
    min_total: usize,
    seed: u64,
    tol: f64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> GradCheck {
    let mut r = rng(seed);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (t, id) in targets.iter().enumerate() {
        let n = store.get(*id).numel();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        picks.extend(idx.into_iter().take(per_tensor).map(|i| (t, i)));
    }
    while picks.len() < min_total {
        let t = r.random_range(0..targets.len());
        picks.push((t, r.random_range(0..store.get(targets[t]).numel())));
    }
    let mut work = store.clone();
    let mut report = GradCheck {
        scalars: 0,
        tensors_covered: 0,
        tensors_total: targets.len(),
        worst: 0.0,
        worst_at: String::new(),
        structural_zeros: 0,
        failures: Vec::new(),
    };
    let mut covered = vec![false; targets.len()];
    for (t, i) in picks {
        let id = targets[t];
        let theta = store.get(id).data()[i];
        let h = 1e-5 * theta.abs().max(1.0);
        work.get_mut(id).data_mut()[i] = theta + h;
        let up = loss(&work);
        work.get_mut(id).data_mut()[i] = theta - h;
        let down = loss(&work);
        work.get_mut(id).data_mut()[i] = theta;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[t].data()[i];
        let name = &store.entry(id).name;
        covered[t] = true;
        report.scalars += 1;
        if shift_invariant(name) {
            report.structural_zeros += 1;
            if !(analytic.abs() < 1e-12 && numeric.abs() < FD_NOISE) {
                report.failures.push(format!("{name}[{i}]: expected zero, analytic {analytic:e} numeric {numeric:e}"));
            }
            continue;
        }
        let rel = rel_error(analytic, numeric);
        if rel > report.worst {
            report.worst = rel;
            report.worst_at = format!("{name}[{i}]");
        }
        if !(rel < tol) {
            report.failures.push(format!("{name}[{i}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"));
        }
    }
    report.tensors_covered = covered.iter().filter(|&&c| c).count();
    report
}

/// Full-network gradient check on ViP-Nano at f64 (parts head, 32×32,
/// batch 2, cross-entropy), sampling every learnable tensor.
pub fn nano_gradient_check(seed: u64, per_tensor: usize, min_total: usize) -> GradCheck {
    let spec = vip::network::VariantSpec::from_name("vip-nano").unwrap();
    let model = Model::<f64>::new(spec, seed, vip::params::InitScheme::Dense { std: 0.3 }).unwrap();
    let mut r = rng(seed + 1);
    let images = Tensor::from_fn(&[2, 3, 32, 32], |_| r.random::<f64>() * 2.0 - 1.0);
    let labels = [r.random_range(0..10), r.random_range(0..10)];
    let run = |store: &ParamStore<f64>, grads: bool| {
        let mut s = vip::params::Session::new(store, vip::params::Mode::Train, 0);
        let x = s.constant(images.clone());
        let out = model.forward(&mut s, x, 0.0).unwrap();
        let loss = s.tape.cross_entropy(out.logits, &labels).unwrap();
        let value = s.tape.value(loss).data()[0];
        if !grads {
            return (value, Vec::new());
        }
        s.backward(loss).unwrap();
        (value, store.ids().map(|id| s.param_grad(id)).collect::<Vec<_>>())
    };
    let targets: Vec<ParamId> = model.params.ids().filter(|&id| model.params.entry(id).kind.trainable()).collect();
    let (_, all) = run(&model.params, true);
    let grads: Vec<Tensor<f64>> = targets.iter().map(|id| all[id.index()].clone()).collect();
    gradient_check(&model.params, &targets, &grads, per_tensor, min_total, seed + 2, 1e-4, |st| run(st, false).0)
}

/// Training configuration for the 64-sample memorization run.
pub fn overfit_config(seed: u64) -> vip::train::TrainConfig {
    vip::train::TrainConfig::from_json(&format!(
        r#"{{
            "variant": "vip-nano", "epochs": 500, "warmup_epochs": 10, "lr": 1e-3,
            "weight_decay": 0.0, "batch_size": 64, "drop_path": 0.0, "seed": {seed},
            "augment": false,
            "train_data": {{"format": "synthetic", "samples": 64, "classes": 10, "seed": 7}}
        }}"#
    ))
    .unwrap()
}

pub struct Overfit {
    /// Steps taken until a full-batch training accuracy of at least 99%.
    pub steps: Option<u64>,
    pub stats: Vec<vip::train::StepStats>,
    pub trainer: vip::train::Trainer<f32>,
}

/// Trains until the batch accuracy reaches 99% or `max_steps` run out.
pub fn overfit(seed: u64, max_steps: u64) -> Overfit {
    let mut trainer = vip::train::Trainer::<f32>::new(overfit_config(seed)).unwrap();
    let mut stats = Vec::new();
    let mut steps = None;
    while (stats.len() as u64) < max_steps {
        let s = trainer.train_step().unwrap();
        let acc = s.accuracy;
        stats.push(s);
        if acc >= 0.99 {
            steps = Some(stats.len() as u64);
            break;
        }
    }
    Overfit { steps, stats, trainer }
}

/// Whether the first `steps` losses of the memorization run never go up.
pub fn loss_non_increasing(seed: u64, steps: usize) -> bool {
    let mut trainer = vip::train::Trainer::<f32>::new(overfit_config(seed)).unwrap();
    let losses: Vec<f64> = (0..=steps).map(|_| trainer.train_step().unwrap().loss).collect();
    losses.windows(2).all(|w| w[1] <= w[0])
}
