//! Forward/backward kernels on raw row-major buffers.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Yields `(oy, iy)` pairs for kernel row `ky` that fall inside the input.
    #[inline]
    fn rows(&self, ky: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.h_out).filter_map(move |oy| {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            (iy >= 0 && (iy as usize) < self.h).then_some((oy, iy as usize))
        })
    }

    /// Output column range `[lo, hi)` whose input column for kernel column
    /// `kx` is in bounds.
    #[inline]
    fn cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let off = kx as isize - self.pad as isize;
        // ox*s + off >= 0
        let lo = if off >= 0 {
            0
        } else {
            ((-off) as usize).div_ceil(s)
        };
        // ox*s + off <= w-1
        let max = self.w as isize - 1 - off;
        let hi = if max < 0 {
            0
        } else {
            (max as usize / s + 1).min(self.w_out)
        };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane_out = g.h_out * g.w_out;
    let plane_in = g.h * g.w;
    let mut out = vec![T::zero(); g.c_out * plane_out];
    for o in 0..g.c_out {
        let out_o = &mut out[o * plane_out..(o + 1) * plane_out];
        if let Some(b) = bias {
            out_o.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..g.c_in {
            let in_c = &input[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = weight[((o * g.c_in + c) * g.k + ky) * g.k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (lo, hi) = g.cols(kx);
                    for (oy, iy) in g.rows(ky) {
                        let orow = &mut out_o[oy * g.w_out..(oy + 1) * g.w_out];
                        let irow = &in_c[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let base = lo + kx - g.pad;
                            for (ov, iv) in orow[lo..hi].iter_mut().zip(&irow[base..]) {
                                *ov += wv * *iv;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`; unneeded parts are left empty.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane_out = g.h_out * g.w_out;
    let plane_in = g.h * g.w;
    let mut d_in = if need_input {
        vec![T::zero(); g.c_in * plane_in]
    } else {
        Vec::new()
    };
    let mut d_w = if need_weight {
        vec![T::zero(); weight.len()]
    } else {
        Vec::new()
    };
    let d_b = if need_bias {
        (0..g.c_out)
            .map(|o| grad_out[o * plane_out..(o + 1) * plane_out].iter().copied().sum())
            .collect()
    } else {
        Vec::new()
    };
    for o in 0..g.c_out {
        let g_o = &grad_out[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.c_in {
            let in_c = &input[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((o * g.c_in + c) * g.k + ky) * g.k + kx;
                    let wv = weight[widx];
                    let (lo, hi) = g.cols(kx);
                    let mut acc = T::zero();
                    for (oy, iy) in g.rows(ky) {
                        let grow = &g_o[oy * g.w_out..(oy + 1) * g.w_out];
                        if g.stride == 1 {
                            let base = lo + kx - g.pad;
                            if need_weight {
                                let irow = &in_c[iy * g.w..(iy + 1) * g.w];
                                acc += dot(&grow[lo..hi], &irow[base..base + (hi - lo)]);
                            }
                            if need_input && wv != T::zero() {
                                let drow = &mut d_in[c * plane_in + iy * g.w..c * plane_in + (iy + 1) * g.w];
                                for (dv, gv) in drow[base..].iter_mut().zip(&grow[lo..hi]) {
                                    *dv += wv * *gv;
                                }
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.pad;
                                if need_weight {
                                    acc += grow[ox] * in_c[iy * g.w + ix];
                                }
                                if need_input {
                                    d_in[c * plane_in + iy * g.w + ix] += wv * grow[ox];
                                }
                            }
                        }
                    }
                    if need_weight {
                        d_w[widx] += acc;
                    }
                }
            }
        }
    }
    (d_in, d_w, d_b)
}

/// Dot product over eight interleaved partial sums, which lets the compiler
/// vectorize despite strict floating-point ordering.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a[..n].chunks_exact(LANES), b[..n].chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (ov, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *ov += av * *bv;
            }
        }
    }
    out
}

/// `g (m×n) · bᵀ` where `b` is `k×n`; result `m×k`.
pub(crate) fn matmul_nt<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`; result `k×n`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (ov, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *ov += av * *gv;
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| y[idx(j)] * g[idx(j)]).sum();
            for j in 0..len {
                out[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
            }
        }
    }
    out
}

/// Partition `[floor(i·n/bins), floor((i+1)·n/bins))` of the `i`-th bin.
#[inline]
pub(crate) fn bin_range(i: usize, n: usize, bins: usize) -> (usize, usize) {
    (i * n / bins, (i + 1) * n / bins)
}

pub(crate) fn adaptive_avg_pool<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, bin: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * bin * bin];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for by in 0..bin {
            let (y0, y1) = bin_range(by, h, bin);
            for bx in 0..bin {
                let (x0, x1) = bin_range(bx, w, bin);
                let mut s = T::zero();
                for yy in y0..y1 {
                    s += plane[yy * w + x0..yy * w + x1].iter().copied().sum::<T>();
                }
                let count = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                out[(ch * bin + by) * bin + bx] = s / count;
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    bin: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for by in 0..bin {
            let (y0, y1) = bin_range(by, h, bin);
            for bx in 0..bin {
                let (x0, x1) = bin_range(bx, w, bin);
                let count = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                let gv = g[(ch * bin + by) * bin + bx] / count;
                for yy in y0..y1 {
                    for v in &mut out[ch * h * w + yy * w + x0..ch * h * w + yy * w + x1] {
                        *v += gv;
                    }
                }
            }
        }
    }
    out
}
