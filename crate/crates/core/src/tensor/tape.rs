use super::kernels::{self, ConvGeometry};
use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel in gather indices meaning "write zero".
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        batch: usize,
        a_shared: bool,
        b_shared: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
        bstrides: Option<Vec<usize>>,
    },
    Mul {
        a: usize,
        b: usize,
        bstrides: Option<Vec<usize>>,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
        groups: usize,
        batch: usize,
        cin: usize,
        cout: usize,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Gather {
        a: usize,
        index: Vec<u32>,
    },
    MeanDim {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    RelLogits {
        q: usize,
        rh: usize,
        rw: usize,
        window: usize,
        heads: usize,
    },
    Expand {
        a: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Nodes are stored in
/// creation order, which is a topological order of the graph.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matmul, convolution and relative
    /// logit nodes recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// `a · b` over the last two axes. Leading axes must match, or one side
    /// must be a plain matrix that is shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(op, &sa, &sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (batch_shape, a_shared, b_shared) = if ba == bb {
            (ba.to_vec(), false, false)
        } else if bb.is_empty() {
            (ba.to_vec(), false, true)
        } else if ba.is_empty() {
            (bb.to_vec(), true, false)
        } else {
            return Err(Error::shape(op, &sa, &sb));
        };
        let batch: usize = batch_shape.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                let aoff = if a_shared { 0 } else { i * m * k };
                let boff = if b_shared { 0 } else { i * k * n };
                kernels::gemm(
                    &ad[aoff..aoff + m * k],
                    &bd[boff..boff + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    trans_b,
                );
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
                batch,
                a_shared,
                b_shared,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let op = if mul { "mul" } else { "add" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bstrides = if sa == sb {
            None
        } else {
            Some(kernels::broadcast_strides(&sa, &sb).ok_or_else(|| Error::shape(op, &sa, &sb))?)
        };
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let f = |x: T, y: T| if mul { x * y } else { x + y };
        let out: Vec<T> = match &bstrides {
            None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(st) => {
                let mut out = vec![T::zero(); ad.len()];
                kernels::for_each_broadcast(&sa, st, |i, j| out[i] = f(ad[i], bd[j]));
                out
            }
        };
        let rg = self.rg(&[a.0, b.0]);
        let node = if mul {
            Op::Mul {
                a: a.0,
                b: b.0,
                bstrides,
            }
        } else {
            Op::Add {
                a: a.0,
                b: b.0,
                bstrides,
            }
        };
        Ok(self.push(Tensor::new(&sa, out)?, node, rg))
    }

    /// Elementwise `a + b`, with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise `a · b`, with `b` broadcast to the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor: T = lit(factor);
        let v = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Scale { a: a.0, factor }, rg)
    }

    /// Softmax over the last axis. `-inf` entries are allowed (masked keys)
    /// provided each row keeps at least one finite entry.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let len = *t.shape().last().ok_or_else(|| Error::dim("softmax", "rank 0 input"))?;
        if len == 0 {
            return Err(Error::dim("softmax", "empty last axis"));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(len) {
            if row.iter().any(|v| v.is_nan() || *v == T::infinity())
                || row.iter().all(|v| *v == T::neg_infinity())
            {
                return Err(Error::NonFinite { op: "softmax" });
            }
            kernels::softmax_row(row);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a: a.0 }, rg))
    }

    /// Normalizes over the last axis and applies the per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::dim("layer_norm", "rank 0 input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gamma)));
        }
        let eps: T = lit(eps);
        let cf: T = lit(c as f64);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / c.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::new(&sx, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Batch normalization with batch statistics over every axis but the
    /// last. Returns the output together with the per-channel batch mean and
    /// biased variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::dim("batch_norm", "rank 0 input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &sx, self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let rows = xd.len() / c.max(1);
        if rows == 0 {
            return Err(Error::dim("batch_norm", "empty batch"));
        }
        let rf: T = lit(rows as f64);
        let eps: T = lit(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for r in 0..rows {
            for j in 0..c {
                mean[j] += xd[r * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / rf);
        for r in 0..rows {
            for j in 0..c {
                let d = xd[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / rf);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            for j in 0..c {
                let h = (xd[r * c + j] - mean[j]) * rstd[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        let v = self.push(
            Tensor::new(&sx, out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_fwd);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Gelu { a: a.0 }, rg)
    }

    /// Grouped 2-D cross-correlation over NCHW input with OIHW weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || groups == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cin_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::dim(
                "conv2d",
                format!("{cin} input / {cout} output channels incompatible with {groups} groups and weight {sw:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeometry {
            in_h: h,
            in_w: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let (oh, ow) = geom.output_size()?;
        let cout_g = cout / groups;
        let ncol = oh * ow;
        let rows = cin_g * kh * kw;
        let mut out = vec![T::zero(); batch * cout * ncol];
        let mut col = vec![T::zero(); rows * ncol];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            for bi in 0..batch {
                for g in 0..groups {
                    let xin = &xd[(bi * cin + g * cin_g) * h * wd..(bi * cin + (g + 1) * cin_g) * h * wd];
                    kernels::im2col(xin, cin_g, &geom, &mut col);
                    let wg = &wdat[g * cout_g * rows..(g + 1) * cout_g * rows];
                    let o = &mut out[(bi * cout + g * cout_g) * ncol..(bi * cout + (g + 1) * cout_g) * ncol];
                    kernels::gemm(wg, &col, o, cout_g, rows, ncol, false, false);
                }
                if let Some(b) = bias {
                    let bd = self.value(b).data();
                    for co in 0..cout {
                        let o = &mut out[(bi * cout + co) * ncol..(bi * cout + co + 1) * ncol];
                        o.iter_mut().for_each(|v| *v += bd[co]);
                    }
                }
            }
        }
        self.macs += (batch * cout * ncol * rows) as u64;
        let mut parents = vec![x.0, w.0];
        if let Some(b) = bias {
            parents.push(b.0);
        }
        let rg = self.rg(&parents);
        Ok(self.push(
            Tensor::new(&[batch, cout, oh, ow], out)?,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                geom,
                groups,
                batch,
                cin,
                cout,
            },
            rg,
        ))
    }

    /// Max pooling over NCHW input; padded positions never win.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::dim("maxpool2d", format!("expected NCHW input, got {sx:?}")));
        }
        let geom = ConvGeometry {
            in_h: sx[2],
            in_w: sx[3],
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        };
        let (oh, ow) = geom.output_size()?;
        let planes = sx[0] * sx[1];
        let (h, w) = (sx[2], sx[3]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if best_i == usize::MAX || xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(&[sx[0], sx[1], oh, ow], out)?,
            Op::MaxPool2d { x: x.0, argmax },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(v, Op::Reshape { a: a.0 }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; perm.len()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= perm.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of rank {}", t.rank())));
        }
        let (data, shape) = kernels::permute(t.data(), t.shape(), perm);
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = a[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, index: Vec<u32>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let ad = self.value(a).data();
        if index.len() != n {
            return Err(Error::dim("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        let mut out = Vec::with_capacity(n);
        for &i in &index {
            if i == GATHER_ZERO {
                out.push(T::zero());
            } else {
                out.push(*ad.get(i as usize).ok_or_else(|| Error::Index(format!("gather index {i}")))?);
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { a: a.0, index }, rg))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_dim(&mut self, a: Var, dim: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if dim >= s.len() {
            return Err(Error::dim("mean_dim", format!("axis {dim} out of range for {s:?}")));
        }
        let outer: usize = s[..dim].iter().product();
        let len = s[dim];
        let inner: usize = s[dim + 1..].iter().product();
        let ad = self.value(a).data();
        let lf: T = lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &ad[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / lf);
        let mut shape = s.clone();
        shape.remove(dim);
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MeanDim {
                a: a.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 }, rg)
    }

    /// Mean softmax cross-entropy of `logits[B×K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} with {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "cross_entropy" });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[l];
            kernels::softmax_row(row);
        }
        let bf: T = lit(labels.len() as f64);
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss / bf),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Factorized relative-position logits for windowed attention.
    ///
    /// `q` has shape `[.., heads, k², d]`; `rh` and `rw` are
    /// `(2k−1) × (heads·d/2)` tables. Head `g` reads columns
    /// `g·d/2 .. (g+1)·d/2` of both tables; the first half of its query
    /// channels pairs with the height table and the second half with the
    /// width table. Offsets are `key − query` per axis.
    pub fn rel_logits(&mut self, q: Var, rh: Var, rw: Var, window: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let srh = self.shape(rh).to_vec();
        let k2 = window * window;
        if sq.len() < 3 || sq[sq.len() - 2] != k2 {
            return Err(Error::dim(
                "rel_logits",
                format!("query shape {sq:?} does not match window {window}"),
            ));
        }
        let heads = sq[sq.len() - 3];
        let d = sq[sq.len() - 1];
        if !d.is_multiple_of(2) {
            return Err(Error::dim("rel_logits", format!("head width {d} must be even")));
        }
        let half = d / 2;
        let rows = 2 * window - 1;
        if srh != [rows, heads * half] || self.shape(rw) != srh.as_slice() {
            return Err(Error::dim(
                "rel_logits",
                format!(
                    "tables {srh:?}/{:?} do not match window {window} with {heads} heads of width {d}",
                    self.shape(rw)
                ),
            ));
        }
        let slabs: usize = sq[..sq.len() - 2].iter().product();
        let qd = self.value(q).data();
        let hd = self.value(rh).data();
        let wd = self.value(rw).data();
        let width = heads * half;
        let mut out = vec![T::zero(); slabs * k2 * k2];
        for s in 0..slabs {
            let g = s % heads;
            for a in 0..k2 {
                let qa = &qd[(s * k2 + a) * d..(s * k2 + a + 1) * d];
                let (ay, ax) = (a / window, a % window);
                for b in 0..k2 {
                    let (by, bx) = (b / window, b % window);
                    let dy = by + window - 1 - ay;
                    let dx = bx + window - 1 - ax;
                    let hrow = &hd[dy * width + g * half..dy * width + (g + 1) * half];
                    let wrow = &wd[dx * width + g * half..dx * width + (g + 1) * half];
                    let mut acc = T::zero();
                    for c in 0..half {
                        acc += qa[c] * hrow[c];
                    }
                    for c in 0..half {
                        acc += qa[half + c] * wrow[c];
                    }
                    out[(s * k2 + a) * k2 + b] = acc;
                }
            }
        }
        self.macs += (slabs * k2 * k2 * d) as u64;
        let mut shape = sq[..sq.len() - 1].to_vec();
        shape.push(k2);
        let rg = self.rg(&[q.0, rh.0, rw.0]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::RelLogits {
                q: q.0,
                rh: rh.0,
                rw: rw.0,
                window,
                heads,
            },
            rg,
        ))
    }

    /// Repeats `a` along a new leading axis of length `times`.
    pub fn expand(&mut self, a: Var, times: usize) -> Var {
        let t = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(times * t.numel());
        for _ in 0..times {
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(&[a.0]);
        self.push(Tensor { shape, data }, Op::Expand { a: a.0 }, rg)
    }

    /// Gradient of the last [`backward`](Self::backward) target with respect
    /// to `v`. Leaves that require grad but were not reached report zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        match &self.grads[v.0] {
            Some(g) => Some(Tensor {
                shape: node.value.shape.clone(),
                data: g.clone(),
            }),
            None if self.backward_done && node.requires_grad && matches!(node.op, Op::Leaf) => {
                Some(Tensor::zeros(node.value.shape()))
            }
            None => None,
        }
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients are kept; interior
    /// gradients are released as soon as they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward called twice on the same tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Graph("loss is detached: no leaf requiring grad is reachable".into()));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn acc(&mut self, idx: usize, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let n = self.nodes[idx].value.numel();
        let mut g = self.grads[idx].take().unwrap_or_else(|| vec![T::zero(); n]);
        f(&mut g, &self.nodes);
        self.grads[idx] = Some(g);
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Temporarily take the op out so parents can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                a_shared,
                b_shared,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                self.acc(*a, |ga, nodes| {
                    let bd = nodes[*b].value.data();
                    for t in 0..*batch {
                        let boff = if *b_shared { 0 } else { t * k * n };
                        let aoff = if *a_shared { 0 } else { t * m * k };
                        // dA = dC·op(B)ᵀ
                        kernels::gemm(
                            &g[t * m * n..(t + 1) * m * n],
                            &bd[boff..boff + k * n],
                            &mut ga[aoff..aoff + m * k],
                            m,
                            n,
                            k,
                            false,
                            !*trans_b,
                        );
                    }
                });
                self.acc(*b, |gb, nodes| {
                    let ad = nodes[*a].value.data();
                    for t in 0..*batch {
                        let boff = if *b_shared { 0 } else { t * k * n };
                        let aoff = if *a_shared { 0 } else { t * m * k };
                        let gc = &g[t * m * n..(t + 1) * m * n];
                        let av = &ad[aoff..aoff + m * k];
                        let gbs = &mut gb[boff..boff + k * n];
                        if *trans_b {
                            // dB (n×k) = dCᵀ·A
                            kernels::gemm(gc, av, gbs, n, m, k, true, false);
                        } else {
                            // dB (k×n) = Aᵀ·dC
                            kernels::gemm(av, gc, gbs, k, m, n, true, false);
                        }
                    }
                });
            }
            Op::Add { a, b, bstrides } => {
                self.acc(*a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                let shape = self.nodes[i].value.shape.clone();
                self.acc(*b, |gb, _| match bstrides {
                    None => gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
                    Some(st) => kernels::for_each_broadcast(&shape, st, |o, j| gb[j] += g[o]),
                });
            }
            Op::Mul { a, b, bstrides } => {
                let shape = self.nodes[i].value.shape.clone();
                self.acc(*a, |ga, nodes| {
                    let bd = nodes[*b].value.data();
                    match bstrides {
                        None => {
                            for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(bd) {
                                *x += y * bv;
                            }
                        }
                        Some(st) => kernels::for_each_broadcast(&shape, st, |o, j| ga[o] += g[o] * bd[j]),
                    }
                });
                self.acc(*b, |gb, nodes| {
                    let ad = nodes[*a].value.data();
                    match bstrides {
                        None => {
                            for ((x, &y), &av) in gb.iter_mut().zip(g).zip(ad) {
                                *x += y * av;
                            }
                        }
                        Some(st) => kernels::for_each_broadcast(&shape, st, |o, j| gb[j] += g[o] * ad[o]),
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.acc(*a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *factor));
            }
            Op::Softmax { a } => {
                let len = *self.nodes[i].value.shape.last().unwrap();
                self.acc(*a, |ga, nodes| {
                    let y = nodes[i].value.data();
                    for ((gr, yr), dr) in ga.chunks_mut(len).zip(y.chunks(len)).zip(g.chunks(len)) {
                        let dot: T = yr.iter().zip(dr).map(|(&p, &q)| p * q).sum();
                        for ((x, &p), &q) in gr.iter_mut().zip(yr).zip(dr) {
                            *x += p * (q - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.nodes[*gamma].value.numel();
                self.acc(*gamma, |gg, _| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(*beta, |gb, _| {
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                });
                self.acc(*x, |gx, nodes| {
                    let gam = nodes[*gamma].value.data();
                    let cf: T = lit(c as f64);
                    for (r, ((gxr, gr), hr)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / cf;
                        m2 = m2 / cf;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            gxr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.nodes[*gamma].value.numel();
                let rows = xhat.len() / c;
                self.acc(*gamma, |gg, _| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(*beta, |gb, _| {
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                });
                self.acc(*x, |gx, nodes| {
                    let gam = nodes[*gamma].value.data();
                    let rf: T = lit(rows as f64);
                    let mut m1 = vec![T::zero(); c];
                    let mut m2 = vec![T::zero(); c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            m1[j] += dh;
                            m2[j] += dh * hr[j];
                        }
                    }
                    for j in 0..c {
                        m1[j] = m1[j] / rf;
                        m2[j] = m2[j] / rf;
                    }
                    for ((gxr, gr), hr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            gxr[j] += rstd[j] * (dh - m1[j] - hr[j] * m2[j]);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                self.acc(*a, |ga, nodes| {
                    let xd = nodes[*a].value.data();
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(xd) {
                        *x += y * gelu_grad(v);
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                groups,
                batch,
                cin,
                cout,
            } => {
                let (oh, ow) = geom.output_size().expect("validated geometry");
                let ncol = oh * ow;
                let cin_g = cin / groups;
                let cout_g = cout / groups;
                let rows = cin_g * geom.kernel_h * geom.kernel_w;
                let plane = geom.in_h * geom.in_w;
                if let Some(b) = bias {
                    self.acc(*b, |gb, _| {
                        for bi in 0..*batch {
                            for co in 0..*cout {
                                let s = &g[(bi * cout + co) * ncol..(bi * cout + co + 1) * ncol];
                                gb[co] += s.iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                let need_w = self.nodes[*w].requires_grad;
                let need_x = self.nodes[*x].requires_grad;
                let mut gw = if need_w {
                    Some(self.grads[*w].take().unwrap_or_else(|| vec![T::zero(); self.nodes[*w].value.numel()]))
                } else {
                    None
                };
                let mut gx = if need_x {
                    Some(self.grads[*x].take().unwrap_or_else(|| vec![T::zero(); self.nodes[*x].value.numel()]))
                } else {
                    None
                };
                let xd = self.nodes[*x].value.data();
                let wd = self.nodes[*w].value.data();
                let mut col = vec![T::zero(); rows * ncol];
                let mut dcol = vec![T::zero(); rows * ncol];
                for bi in 0..*batch {
                    for gi in 0..*groups {
                        let xoff = (bi * cin + gi * cin_g) * plane;
                        let gout = &g[(bi * cout + gi * cout_g) * ncol..(bi * cout + (gi + 1) * cout_g) * ncol];
                        let wg = &wd[gi * cout_g * rows..(gi + 1) * cout_g * rows];
                        if let Some(gw) = gw.as_mut() {
                            kernels::im2col(&xd[xoff..xoff + cin_g * plane], cin_g, geom, &mut col);
                            kernels::gemm(
                                gout,
                                &col,
                                &mut gw[gi * cout_g * rows..(gi + 1) * cout_g * rows],
                                cout_g,
                                ncol,
                                rows,
                                false,
                                true,
                            );
                        }
                        if let Some(gx) = gx.as_mut() {
                            dcol.iter_mut().for_each(|v| *v = T::zero());
                            kernels::gemm(wg, gout, &mut dcol, rows, cout_g, ncol, true, false);
                            kernels::col2im(&dcol, cin_g, geom, &mut gx[xoff..xoff + cin_g * plane]);
                        }
                    }
                }
                if let Some(gw) = gw {
                    self.grads[*w] = Some(gw);
                }
                if let Some(gx) = gx {
                    self.grads[*x] = Some(gx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                self.acc(*x, |gx, _| {
                    for (&src, &y) in argmax.iter().zip(g) {
                        gx[src] += y;
                    }
                });
            }
            Op::Reshape { a } | Op::Expand { a } => {
                self.acc(*a, |ga, _| {
                    let n = ga.len();
                    for chunk in g.chunks(n) {
                        ga.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Permute { a, perm } => {
                let out_shape = self.nodes[i].value.shape.clone();
                let inv = kernels::inverse_permutation(perm);
                let (back, _) = kernels::permute(g, &out_shape, &inv);
                self.acc(*a, |ga, _| ga.iter_mut().zip(&back).for_each(|(x, &y)| *x += y));
            }
            Op::Gather { a, index } => {
                self.acc(*a, |ga, _| {
                    for (&src, &y) in index.iter().zip(g) {
                        if src != GATHER_ZERO {
                            ga[src as usize] += y;
                        }
                    }
                });
            }
            Op::MeanDim { a, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let lf: T = lit(len as f64);
                self.acc(*a, |ga, _| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y / lf);
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                self.acc(*a, |ga, _| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let bf: T = lit(labels.len() as f64);
                let k = probs.len() / labels.len().max(1);
                self.acc(*logits, |gl, _| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            gl[r * k + j] += g[0] * (probs[r * k + j] - onehot) / bf;
                        }
                    }
                });
            }
            Op::RelLogits {
                q,
                rh,
                rw,
                window,
                heads,
            } => {
                let window = *window;
                let heads = *heads;
                let k2 = window * window;
                let sq = self.nodes[*q].value.shape.clone();
                let d = sq[sq.len() - 1];
                let half = d / 2;
                let width = heads * half;
                let slabs = g.len() / (k2 * k2);
                let offsets = |a: usize, b: usize| {
                    (
                        b / window + window - 1 - a / window,
                        b % window + window - 1 - a % window,
                    )
                };
                self.acc(*q, |gq, nodes| {
                    let hd = nodes[*rh].value.data();
                    let wd = nodes[*rw].value.data();
                    for s in 0..slabs {
                        let gh = s % heads;
                        for a in 0..k2 {
                            let gqa = &mut gq[(s * k2 + a) * d..(s * k2 + a + 1) * d];
                            for b in 0..k2 {
                                let y = g[(s * k2 + a) * k2 + b];
                                let (dy, dx) = offsets(a, b);
                                for c in 0..half {
                                    gqa[c] += y * hd[dy * width + gh * half + c];
                                    gqa[half + c] += y * wd[dx * width + gh * half + c];
                                }
                            }
                        }
                    }
                });
                for (table, second) in [(*rh, false), (*rw, true)] {
                    self.acc(table, |gt, nodes| {
                        let qd = nodes[*q].value.data();
                        for s in 0..slabs {
                            let gh = s % heads;
                            for a in 0..k2 {
                                let qa = &qd[(s * k2 + a) * d..(s * k2 + a + 1) * d];
                                for b in 0..k2 {
                                    let y = g[(s * k2 + a) * k2 + b];
                                    let (dy, dx) = offsets(a, b);
                                    let (row, qoff) = if second { (dx, half) } else { (dy, 0) };
                                    let dst = &mut gt[row * width + gh * half..row * width + (gh + 1) * half];
                                    for c in 0..half {
                                        dst[c] += y * qa[qoff + c];
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
        self.nodes[i].op = op;
    }
}

const GELU_K: f64 = 0.044_715;

fn gelu_consts<T: Scalar>() -> (T, T) {
    (lit((2.0 / std::f64::consts::PI).sqrt()), lit(GELU_K))
}

pub(crate) fn gelu_fwd<T: Scalar>(x: T) -> T {
    let (s, k) = gelu_consts::<T>();
    let half: T = lit(0.5);
    half * x * (T::one() + (s * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (s, k) = gelu_consts::<T>();
    let half: T = lit(0.5);
    let three: T = lit(3.0);
    let t = (s * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * s * (T::one() + three * k * x * x)
}
