//! Forward and backward kernels over raw row-major slices.

use super::{broadcast_strides, Element};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Visit every multi-index of `shape` in row-major order, tracking the flat
/// offset into each of the given stride sets.
pub(crate) fn for_each_offset<const K: usize>(
    shape: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K]),
) {
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = [0usize; K];
    for lin in 0..numel {
        f(lin, offs);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            for (k, s) in strides.iter().enumerate() {
                offs[k] += s[ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for (k, s) in strides.iter().enumerate() {
                offs[k] -= s[ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Element>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 && a_shape == out_shape {
        return a.iter().map(|&x| f(x, b[0])).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let numel: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    for_each_offset(out_shape, [&sa, &sb], |lin, [oa, ob]| {
        out[lin] = f(a[oa], b[ob]);
    });
    out
}

/// Sum a gradient of the broadcast shape back down to `target`.
pub(crate) fn reduce_to_shape<T: Element>(
    grad: &[T],
    out_shape: &[usize],
    target: &[usize],
) -> Vec<T> {
    if out_shape == target {
        return grad.to_vec();
    }
    let numel: usize = target.iter().product();
    let mut acc = vec![T::zero(); numel];
    if numel == 1 {
        acc[0] = grad.iter().copied().sum();
        return acc;
    }
    let st = broadcast_strides(target, out_shape);
    for_each_offset(out_shape, [&st], |lin, [ot]| {
        acc[ot] = acc[ot] + grad[lin];
    });
    acc
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.hout * self.wout
    }
}

/// Output columns `[lo, hi)` whose input column `ow·stride + kj − pad` is in range.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let first = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let limit = (g.w + g.pad).saturating_sub(kj); // exclusive bound on ow·stride
    let last = if limit == 0 { 0 } else { ((limit - 1) / g.stride + 1).min(g.wout) };
    (first.min(last), last)
}

/// Unfold one image into `cols[row·ld + offset ..]`, one row per (c, ki, kj).
fn im2col<T: Element>(g: &ConvGeom, img: &[T], cols: &mut [T], ld: usize, offset: usize) {
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.hout {
                    let dst = &mut cols[row * ld + offset + oh * g.wout..][..g.wout];
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h || lo == hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let iw0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[iw0..iw0 + hi - lo]);
                    } else {
                        for (i, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[iw0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeom, cols: &[T], ld: usize, offset: usize, img: &mut [T]) {
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                for oh in 0..g.hout {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let src = &cols[row * ld + offset + oh * g.wout..][lo..hi];
                    let iw0 = lo * g.stride + kj - g.pad;
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (i, &v) in src.iter().enumerate() {
                        let d = &mut dst[iw0 + i * g.stride];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Input images as a `[rows, N·hw]` column matrix.
fn unfold_batch<T: Element>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let ld = g.n * hw;
    let in_len = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); rows * ld];
    for n in 0..g.n {
        let img = &input[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            for c in 0..g.cin {
                cols[c * ld + n * hw..][..hw].copy_from_slice(&img[c * hw..(c + 1) * hw]);
            }
        } else {
            im2col(g, img, &mut cols, ld, n * hw);
        }
    }
    cols
}

/// `[N, C, hw]` ↔ `[C, N·hw]`.
fn swap_batch_channel<T: Element>(x: &[T], a: usize, b: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * hw..][..hw].copy_from_slice(&x[(i * b + j) * hw..][..hw]);
        }
    }
    out
}

/// All images go through a single GEMM: `[Cout, rows] × [rows, N·hw]`.
pub(crate) fn conv2d_forward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let ld = g.n * hw;
    let cols = unfold_batch(g, input);
    let mut wide = vec![T::zero(); g.cout * ld];
    if let Some(b) = bias {
        for (co, row) in wide.chunks_mut(ld).enumerate() {
            row.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(g.cout, rows, ld, weight, rows as isize, 1, &cols, ld as isize, 1, beta, &mut wide, ld as isize, 1);
    swap_batch_channel(&wide, g.cout, g.n, hw)
}

/// Returns (grad_input, grad_weight, grad_bias); each only when requested.
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let ld = g.n * hw;
    let in_len = g.cin * g.h * g.w;
    // [Cout, N·hw]
    let go = swap_batch_channel(grad_out, g.n, g.cout, hw);
    let gb = want_bias.then(|| go.chunks(ld).map(|row| row.iter().copied().sum::<T>()).collect());
    let gw = want_weight.then(|| {
        let cols = unfold_batch(g, input);
        let mut gw = vec![T::zero(); g.cout * rows];
        // go · colsᵀ
        T::gemm(g.cout, ld, rows, &go, ld as isize, 1, &cols, 1, ld as isize, T::zero(), &mut gw, rows as isize, 1);
        gw
    });
    let gin = want_input.then(|| {
        let mut gcols = vec![T::zero(); rows * ld];
        // Wᵀ · go
        T::gemm(rows, g.cout, ld, weight, 1, rows as isize, &go, ld as isize, 1, T::zero(), &mut gcols, ld as isize, 1);
        if g.is_pointwise() {
            return swap_batch_channel(&gcols, g.cin, g.n, hw);
        }
        let mut gin = vec![T::zero(); g.n * in_len];
        for n in 0..g.n {
            col2im_add(g, &gcols, ld, n * hw, &mut gin[n * in_len..(n + 1) * in_len]);
        }
        gin
    });
    (gin, gw, gb)
}

/// Per-(n, group) statistics of x viewed as [n, c, inner].
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes contiguous segments of length `seg` (one segment per statistic).
pub(crate) fn segment_norm_forward<T: Element>(
    x: &[T],
    seg: usize,
    channel_of: impl Fn(usize) -> usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, NormStats<T>) {
    let eps = T::from_f64(NORM_EPS);
    let nseg = x.len() / seg;
    let inv = T::one() / T::from_f64(seg as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(nseg);
    let mut rstd = Vec::with_capacity(nseg);
    for s in 0..nseg {
        let xs = &x[s * seg..(s + 1) * seg];
        let mu = xs.iter().copied().sum::<T>() * inv;
        let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
        let r = T::one() / (var + eps).sqrt();
        for (i, &v) in xs.iter().enumerate() {
            let flat = s * seg + i;
            let c = channel_of(flat);
            out[flat] = (v - mu) * r * gamma[c] + beta[c];
        }
        mean.push(mu);
        rstd.push(r);
    }
    (out, NormStats { mean, rstd })
}

pub(crate) fn segment_norm_backward<T: Element>(
    x: &[T],
    seg: usize,
    channel_of: impl Fn(usize) -> usize,
    gamma: &[T],
    stats: &NormStats<T>,
    gy: &[T],
    channels: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let nseg = x.len() / seg;
    let m = T::from_f64(seg as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];
    for s in 0..nseg {
        let (mu, r) = (stats.mean[s], stats.rstd[s]);
        let mut sum1 = T::zero();
        let mut sum2 = T::zero();
        for i in 0..seg {
            let flat = s * seg + i;
            let c = channel_of(flat);
            let xhat = (x[flat] - mu) * r;
            let dxhat = gy[flat] * gamma[c];
            sum1 = sum1 + dxhat;
            sum2 = sum2 + dxhat * xhat;
            ggamma[c] = ggamma[c] + gy[flat] * xhat;
            gbeta[c] = gbeta[c] + gy[flat];
        }
        for i in 0..seg {
            let flat = s * seg + i;
            let c = channel_of(flat);
            let xhat = (x[flat] - mu) * r;
            let dxhat = gy[flat] * gamma[c];
            gx[flat] = r / m * (m * dxhat - sum1 - xhat * sum2);
        }
    }
    (gx, ggamma, gbeta)
}

pub(crate) fn softmax_rows<T: Element>(x: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - max).exp();
            total = total + *o;
        }
        for o in dst.iter_mut() {
            *o = *o / total;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward<T: Element>(y: &[T], gy: &[T], d: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for ((ys, gs), dst) in y.chunks(d).zip(gy.chunks(d)).zip(gx.chunks_mut(d)) {
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in dst.iter_mut().zip(ys).zip(gs) {
            *o = yv * (gv - dot);
        }
    }
    gx
}

pub(crate) fn permute<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); x.len()];
    for_each_offset(&out_shape, [&gather], |lin, [src]| out[lin] = x[src]);
    (out, out_shape)
}

pub(crate) fn upsample2x<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        for i in 0..2 * h {
            for j in 0..2 * w {
                out[(p * 2 * h + i) * 2 * w + j] = x[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Element>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..2 * h {
            for j in 0..2 * w {
                let dst = &mut out[(p * h + i / 2) * w + j / 2];
                *dst = *dst + g[(p * 2 * h + i) * 2 * w + j];
            }
        }
    }
    out
}

/// 2×2 mean pooling of [planes, h, w] (h, w even).
pub(crate) fn avg_pool2x<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                let at = |di: usize, dj: usize| x[(p * h + 2 * i + di) * w + 2 * j + dj];
                out[(p * ho + i) * wo + j] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2x_backward<T: Element>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[(p * h + i) * w + j] = g[(p * ho + i / 2) * wo + j / 2] * quarter;
            }
        }
    }
    out
}
