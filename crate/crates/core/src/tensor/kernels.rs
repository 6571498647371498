//! Raw numeric kernels over row-major slices.
//!
//! Parallel kernels split work by output rows only, so every output element
//! is reduced in the same order regardless of the thread count.

use rayon::prelude::*;

use super::Scalar;
use crate::error::{Error, Result};

const PAR_THRESHOLD: usize = 1 << 15;

/// Caps the global rayon pool used by the kernels. Only the first call has
/// an effect.
pub fn set_threads(threads: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .is_ok()
}

/// `c += op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape
/// `k×n`. With `trans_a` the buffer `a` is stored `k×m`; with `trans_b` the
/// buffer `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let row = |i: usize, crow: &mut [T]| {
        if trans_b {
            for (j, cv) in crow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for p in 0..k {
                    let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                    acc += av * brow[p];
                }
                *cv += acc;
            }
        } else {
            for p in 0..k {
                let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// Row-major strides of a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides into `b` for every axis of `a` when `b` broadcasts against `a`
/// (numpy rules, right aligned, `b` never larger than `a`).
pub fn broadcast_strides(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if b.len() > a.len() {
        return None;
    }
    let off = a.len() - b.len();
    let bs = strides(b);
    let mut out = vec![0; a.len()];
    for (i, &bd) in b.iter().enumerate() {
        let ad = a[off + i];
        if bd == ad {
            out[off + i] = if bd == 1 { 0 } else { bs[i] };
        } else if bd != 1 {
            return None;
        }
    }
    Some(out)
}

/// Calls `f(out_index, b_index)` for every element of a tensor of shape `a`
/// with `b` broadcast to it through `bstrides`.
pub fn for_each_broadcast(a: &[usize], bstrides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = a.iter().product();
    if n == 0 {
        return;
    }
    // Fast path: b is a contiguous suffix block.
    let rank = a.len();
    let mut idx = vec![0usize; rank];
    let mut boff = 0usize;
    for i in 0..n {
        f(i, boff);
        // odometer increment
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            boff += bstrides[ax];
            if idx[ax] < a[ax] {
                break;
            }
            boff -= bstrides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Generic axis permutation: `out.shape[i] = shape[perm[i]]`.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a 2-D convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_size(&self) -> Result<(usize, usize)> {
        let ph = self.in_h + 2 * self.padding;
        let pw = self.in_w + 2 * self.padding;
        if self.kernel_h > ph || self.kernel_w > pw || self.stride == 0 {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {}x{} (stride {}) does not fit padded input {}x{}",
                    self.kernel_h, self.kernel_w, self.stride, ph, pw
                ),
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

/// Unfolds `channels` planes of size `in_h×in_w` into a
/// `(channels·kh·kw) × (out_h·out_w)` column matrix.
pub fn im2col<T: Scalar>(input: &[T], channels: usize, g: &ConvGeometry, col: &mut [T]) {
    let (oh, ow) = g.output_size().expect("validated geometry");
    let plane = g.in_h * g.in_w;
    let ncol = oh * ow;
    for c in 0..channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let r = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[r * ncol..(r + 1) * ncol];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, dv) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *dv = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the planes.
pub fn col2im<T: Scalar>(col: &[T], channels: usize, g: &ConvGeometry, out: &mut [T]) {
    let (oh, ow) = g.output_size().expect("validated geometry");
    let plane = g.in_h * g.in_w;
    let ncol = oh * ow;
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let r = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[r * ncol..(r + 1) * ncol];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        dst[iy as usize * g.in_w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
