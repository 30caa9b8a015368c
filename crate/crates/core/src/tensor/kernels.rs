//! Value-level numeric kernels shared by the tape's forward and backward
//! rules. Convolutions follow the cross-correlation convention: the kernel is
//! not flipped.

use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding; a stride-`s` convolution produces `ceil(n / s)` outputs
    /// and its transpose produces `n · s`.
    Same,
    /// No padding.
    Valid,
}

/// Resolved geometry of a 2-D convolution over a `h×w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    /// Input (un-padded) size.
    pub h: usize,
    pub w: usize,
    /// Output size.
    pub ho: usize,
    pub wo: usize,
}

fn same_pad(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    (out, total / 2)
}

pub fn conv_out_size(n: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(n.div_ceil(stride)),
        Padding::Valid => (n >= k).then(|| (n - k) / stride + 1),
    }
}

pub fn conv_transpose_out_size(n: usize, k: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => n * stride,
        Padding::Valid => (n - 1) * stride + k,
    }
}

impl ConvGeom {
    /// Geometry of a convolution mapping an `h×w` input to its output.
    pub fn conv(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let too_large = || Error::KernelTooLarge {
            kernel: vec![kh, kw],
            input: vec![h, w],
        };
        if h == 0 || w == 0 {
            return Err(too_large());
        }
        let (ho, wo, pt, pl) = match padding {
            Padding::Same => {
                let (ho, pt) = same_pad(h, kh, stride);
                let (wo, pl) = same_pad(w, kw, stride);
                // A kernel wider than the padded extent would read only zeros
                // on some side; reject it like a valid convolution would.
                if kh > h + 2 * pt + 1 || kw > w + 2 * pl + 1 {
                    return Err(too_large());
                }
                (ho, wo, pt, pl)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(too_large());
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            kh,
            kw,
            stride,
            pad_top: pt,
            pad_left: pl,
            h,
            w,
            ho,
            wo,
        })
    }

    /// Geometry of the convolution whose adjoint maps an `hi×wi` input to the
    /// transposed-convolution output.
    pub fn transpose(hi: usize, wi: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 || hi == 0 || wi == 0 {
            return Err(Error::InvalidArgument(format!(
                "transpose convolution of {hi}x{wi} input with stride {stride}"
            )));
        }
        if padding == Padding::Same && (kh < stride || kw < stride) {
            return Err(Error::KernelTooLarge {
                kernel: vec![kh, kw],
                input: vec![hi, wi],
            });
        }
        let h = conv_transpose_out_size(hi, kh, stride, padding);
        let w = conv_transpose_out_size(wi, kw, stride, padding);
        let g = ConvGeom::conv(h, w, kh, kw, stride, padding)?;
        debug_assert_eq!((g.ho, g.wo), (hi, wi));
        Ok(g)
    }

    pub fn col_rows(&self, channels: usize) -> usize {
        channels * self.kh * self.kw
    }
}

/// Unfolds `x[n, c, h, w]` into `col[c·kh·kw, n·ho·wo]`.
pub fn im2col<T: Real>(x: &[T], n: usize, c: usize, g: &ConvGeom, col: &mut [T]) {
    let plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let cols = n * out_plane;
    debug_assert_eq!(col.len(), c * g.kh * g.kw * cols);
    for ci in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for ni in 0..n {
                    let src = &x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                    let dst = &mut dst_row[ni * out_plane..(ni + 1) * out_plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
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
}

/// Adjoint of [`im2col`]: accumulates `col` back into `x[n, c, h, w]`.
pub fn col2im<T: Real>(col: &[T], n: usize, c: usize, g: &ConvGeom, x: &mut [T]) {
    let plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let cols = n * out_plane;
    for ci in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for ni in 0..n {
                    let dst = &mut x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                    let src = &src_row[ni * out_plane..(ni + 1) * out_plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[n, ch, p] -> [ch, n·p]`
pub fn batch_to_channel_major<T: Real>(x: &[T], n: usize, ch: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..ch {
            out[ci * n * p + ni * p..ci * n * p + (ni + 1) * p]
                .copy_from_slice(&x[(ni * ch + ci) * p..(ni * ch + ci + 1) * p]);
        }
    }
    out
}

/// `[ch, n·p] -> [n, ch, p]`
pub fn channel_major_to_batch<T: Real>(x: &[T], n: usize, ch: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..ch {
            out[(ni * ch + ci) * p..(ni * ch + ci + 1) * p]
                .copy_from_slice(&x[ci * n * p + ni * p..ci * n * p + (ni + 1) * p]);
        }
    }
    out
}

/// Cross-correlation of `x[n, c, h, w]` with `k[o, c, kh, kw]`.
pub fn conv2d_forward<T: Real>(x: &[T], n: usize, c: usize, k: &[T], o: usize, g: &ConvGeom) -> Vec<T> {
    let rows = g.col_rows(c);
    let p = g.ho * g.wo;
    let mut col = vec![T::zero(); rows * n * p];
    im2col(x, n, c, g, &mut col);
    let mut out = vec![T::zero(); o * n * p];
    T::gemm(o, rows, n * p, k, false, &col, false, T::zero(), &mut out);
    channel_major_to_batch(&out, n, o, p)
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    k: &[T],
    o: usize,
    g: &ConvGeom,
    grad_out: &[T],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let rows = g.col_rows(c);
    let p = g.ho * g.wo;
    let gt = batch_to_channel_major(grad_out, n, o, p);
    let dk = want_k.then(|| {
        let mut col = vec![T::zero(); rows * n * p];
        im2col(x, n, c, g, &mut col);
        let mut dk = vec![T::zero(); o * rows];
        T::gemm(o, n * p, rows, &gt, false, &col, true, T::zero(), &mut dk);
        dk
    });
    let dx = want_x.then(|| {
        let mut dcol = vec![T::zero(); rows * n * p];
        T::gemm(rows, o, n * p, k, true, &gt, false, T::zero(), &mut dcol);
        let mut dx = vec![T::zero(); n * c * g.h * g.w];
        col2im(&dcol, n, c, g, &mut dx);
        dx
    });
    (dx, dk)
}

/// Transposed convolution: the adjoint of [`conv2d_forward`] with geometry
/// `g`, mapping `x[n, o, ho, wo]` to `[n, c, h, w]`.
pub fn conv_transpose_forward<T: Real>(x: &[T], n: usize, o: usize, k: &[T], c: usize, g: &ConvGeom) -> Vec<T> {
    let rows = g.col_rows(c);
    let p = g.ho * g.wo;
    let xt = batch_to_channel_major(x, n, o, p);
    let mut col = vec![T::zero(); rows * n * p];
    T::gemm(rows, o, n * p, k, true, &xt, false, T::zero(), &mut col);
    let mut out = vec![T::zero(); n * c * g.h * g.w];
    col2im(&col, n, c, g, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward<T: Real>(
    x: &[T],
    n: usize,
    o: usize,
    k: &[T],
    c: usize,
    g: &ConvGeom,
    grad_out: &[T],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let rows = g.col_rows(c);
    let p = g.ho * g.wo;
    let mut col = vec![T::zero(); rows * n * p];
    im2col(grad_out, n, c, g, &mut col);
    let dx = want_x.then(|| {
        let mut dxt = vec![T::zero(); o * n * p];
        T::gemm(o, rows, n * p, k, false, &col, false, T::zero(), &mut dxt);
        channel_major_to_batch(&dxt, n, o, p)
    });
    let dk = want_k.then(|| {
        let xt = batch_to_channel_major(x, n, o, p);
        let mut dk = vec![T::zero(); o * rows];
        T::gemm(o, n * p, rows, &xt, false, &col, true, T::zero(), &mut dk);
        dk
    });
    (dx, dk)
}

/// True convolution of every channel of sample `i` in `x[n, c, h, w]` with
/// kernel `k[i]` (`k[n, kh, kw]`), zero boundary, output the size of the
/// input. The kernel centre is at `(kh / 2, kw / 2)`.
pub fn blur_forward<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize, k: &[T], kh: usize, kw: usize) -> Vec<T> {
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        let kern = &k[ni * kh * kw..(ni + 1) * kh * kw];
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let src = &x[base..base + h * w];
            let dst = &mut out[base..base + h * w];
            for a in 0..kh {
                for b in 0..kw {
                    let kv = kern[a * kw + b];
                    if kv == T::zero() {
                        continue;
                    }
                    // y[i, j] += k[a, b] · x[i - a + ch, j - b + cw]
                    let dy = ch - a as isize;
                    let dx = cw - b as isize;
                    accumulate_shifted(src, dst, h, w, dy, dx, kv);
                }
            }
        }
    }
    out
}

/// `dst[i, j] += scale · src[i + dy, j + dx]` where in bounds.
fn accumulate_shifted<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, dy: isize, dx: isize, scale: T) {
    let i0 = (-dy).max(0) as usize;
    let i1 = (h as isize - dy).min(h as isize).max(0) as usize;
    let j0 = (-dx).max(0) as usize;
    let j1 = (w as isize - dx).min(w as isize).max(0) as usize;
    if j0 >= j1 {
        return;
    }
    for i in i0..i1 {
        let si = (i as isize + dy) as usize;
        let drow = &mut dst[i * w + j0..i * w + j1];
        let srow = &src[si * w + (j0 as isize + dx) as usize..si * w + (j1 as isize + dx) as usize];
        for (d, &s) in drow.iter_mut().zip(srow) {
            *d += scale * s;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn blur_backward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: &[T],
    kh: usize,
    kw: usize,
    grad_out: &[T],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_k.then(|| vec![T::zero(); k.len()]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let g = &grad_out[base..base + h * w];
            let src = &x[base..base + h * w];
            for a in 0..kh {
                for b in 0..kw {
                    let dy = ch - a as isize;
                    let ddx = cw - b as isize;
                    if let Some(dx) = dx.as_mut() {
                        let kv = k[ni * kh * kw + a * kw + b];
                        if kv != T::zero() {
                            // dx[i + dy, j + ddx] += k · g[i, j]
                            accumulate_shifted(g, &mut dx[base..base + h * w], h, w, -dy, -ddx, kv);
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let mut acc = T::zero();
                        let i0 = (-dy).max(0) as usize;
                        let i1 = (h as isize - dy).min(h as isize).max(0) as usize;
                        let j0 = (-ddx).max(0) as usize;
                        let j1 = (w as isize - ddx).min(w as isize).max(0) as usize;
                        for i in i0..i1 {
                            let si = (i as isize + dy) as usize;
                            for j in j0..j1 {
                                acc += g[i * w + j] * src[si * w + (j as isize + ddx) as usize];
                            }
                        }
                        dk[ni * kh * kw + a * kw + b] += acc;
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Softmax over contiguous blocks of `block` elements, stabilised by
/// subtracting each block's maximum.
pub fn softmax_blocks<T: Real>(x: &[T], block: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(block).zip(out.chunks_mut(block)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

/// Output shape of numpy-style broadcasting.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out` with zeros on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output, in row-major order.
pub fn for_each_broadcast(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if a == out && b == out {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}
