//! Slice-level compute kernels in NHWC layout.
//!
//! Every reduction accumulates in a fixed row-major order, so results do not
//! depend on how many worker threads split the outer loops.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Work size (multiply-adds) above which row loops are split across threads.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No implicit border; output extent `floor((in - k) / stride) + 1`.
    #[default]
    Valid,
    /// Zero border so the output extent is `ceil(in / stride)`.
    Same,
}

/// Resolved geometry of one 2-D convolution over an NHWC batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - kernel) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            (out, total / 2)
        }
    }
}

impl ConvGeometry {
    /// `input` is `[N, H, W, Cin]`, `kernel` is `[Kh, Kw, Cin, Cout]`.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let &[batch, in_h, in_w, in_c] = input else {
            return Err(Error::shape(format!(
                "conv2d input must be [N, H, W, C], got {input:?}"
            )));
        };
        let &[k_h, k_w, k_c, out_c] = kernel else {
            return Err(Error::shape(format!(
                "conv2d kernel must be [Kh, Kw, Cin, Cout], got {kernel:?}"
            )));
        };
        if stride == 0 {
            return Err(Error::config("conv2d stride must be at least 1"));
        }
        if k_c != in_c {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {in_c} channels, kernel expects {k_c}"
            )));
        }
        if k_h == 0 || k_w == 0 || out_c == 0 {
            return Err(Error::shape(format!("conv2d kernel has a zero extent: {kernel:?}")));
        }
        if padding == Padding::Valid && (k_h > in_h || k_w > in_w) {
            return Err(Error::shape(format!(
                "conv2d kernel {k_h}x{k_w} larger than input {in_h}x{in_w}"
            )));
        }
        if in_h == 0 || in_w == 0 {
            return Err(Error::shape("conv2d input has zero spatial extent"));
        }
        let (out_h, pad_top) = output_extent(in_h, k_h, stride, padding);
        let (out_w, pad_left) = output_extent(in_w, k_w, stride, padding);
        Ok(ConvGeometry {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Length of one unrolled receptive field (`Kh * Kw * Cin`).
    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    /// Output positions per image.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }
}

/// Unrolls every receptive field into a row of a `(N * positions) x patch_len`
/// matrix. Patch order is `(ky, kx, ci)`.
pub fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); g.batch * g.positions() * patch];
    let image_len = g.in_h * g.in_w * g.in_c;
    let fill = |(row, dst): (usize, &mut [T])| {
        let n = row / g.positions();
        let p = row % g.positions();
        let image = &input[n * image_len..(n + 1) * image_len];
        for_each_span(g, p, |src, off, len| {
            dst[off..off + len].copy_from_slice(&image[src..src + len]);
        });
    };
    if cols.len() >= PAR_THRESHOLD {
        cols.par_chunks_mut(patch).enumerate().for_each(fill);
    } else {
        cols.chunks_mut(patch).enumerate().for_each(fill);
    }
    cols
}

/// Visits the in-bounds part of each kernel row for output position `p` as
/// `(input offset, patch offset, length)`; both sides are contiguous.
#[inline]
fn for_each_span(g: &ConvGeometry, p: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (oy, ox) = (p / g.out_w, p % g.out_w);
    let x0 = ox * g.stride;
    let kx_lo = g.pad_left.saturating_sub(x0);
    let kx_hi = g.k_w.min((g.in_w + g.pad_left).saturating_sub(x0));
    if kx_lo >= kx_hi {
        return;
    }
    let len = (kx_hi - kx_lo) * g.in_c;
    for ky in 0..g.k_h {
        let Some(y) = (oy * g.stride + ky).checked_sub(g.pad_top) else {
            continue;
        };
        if y >= g.in_h {
            break;
        }
        let x = x0 + kx_lo - g.pad_left;
        f((y * g.in_w + x) * g.in_c, (ky * g.k_w + kx_lo) * g.in_c, len);
    }
}

/// Scatter-adds unrolled patch gradients back onto an NHWC input gradient.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch_len();
    let image_len = g.in_h * g.in_w * g.in_c;
    let mut out = vec![T::zero(); g.batch * image_len];
    let scatter = |(n, image): (usize, &mut [T])| {
        for p in 0..g.positions() {
            let row = &cols[(n * g.positions() + p) * patch..][..patch];
            for_each_span(g, p, |dst, off, len| {
                for (d, &s) in image[dst..dst + len].iter_mut().zip(&row[off..off + len]) {
                    *d += s;
                }
            });
        }
    };
    if cols.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(image_len).enumerate().for_each(scatter);
    } else {
        out.chunks_mut(image_len).enumerate().for_each(scatter);
    }
    out
}

const MR: usize = 4;
const NR: usize = 16;

/// `a (m x k) * b (k x n)`, each output accumulated over `k` in index order.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    if n == 0 || m == 0 || k == 0 {
        return out;
    }
    let block = MR * 16;
    let run = |(bi, dst): (usize, &mut [T])| matmul_rows(a, b, k, n, bi * block, dst);
    if m * k * n >= PAR_THRESHOLD && m > block {
        out.par_chunks_mut(block * n).enumerate().for_each(run);
    } else {
        out.chunks_mut(block * n).enumerate().for_each(run);
    }
    out
}

/// `a^T * b` for `a` stored as `k x m`, without materializing the transpose.
/// Works through `k` in cache-sized panels; each output still sums over `k`
/// in index order.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    if n == 0 || m == 0 || k == 0 {
        return out;
    }
    let block = MR * 16;
    let run = |(bi, dst): (usize, &mut [T])| {
        if n >= 2 * NR {
            // Wide rows: stream both operands once, updating whole output rows.
            for (arow, brow) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
                for (i, drow) in dst.chunks_exact_mut(n).enumerate() {
                    let av = arow[bi * block + i];
                    for (d, &bv) in drow.iter_mut().zip(brow) {
                        *d += av * bv;
                    }
                }
            }
        } else {
            for k0 in (0..k).step_by(KC) {
                tn_panel(a, b, m, n, bi * block, k0..k.min(k0 + KC), dst);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > block {
        out.par_chunks_mut(block * n).enumerate().for_each(run);
    } else {
        out.chunks_mut(block * n).enumerate().for_each(run);
    }
    out
}

const KC: usize = 256;

fn tn_panel<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    n: usize,
    first: usize,
    ks: std::ops::Range<usize>,
    dst: &mut [T],
) {
    let rows = dst.len() / n;
    let mut r = 0;
    while r + MR <= rows {
        let col = first + r;
        let mut j = 0;
        while j + NR <= n {
            let mut acc: [[T; NR]; MR] =
                std::array::from_fn(|ii| dst[(r + ii) * n + j..][..NR].try_into().unwrap());
            for kk in ks.clone() {
                let av: &[T; MR] = a[kk * m + col..][..MR].try_into().unwrap();
                let bv: &[T; NR] = b[kk * n + j..][..NR].try_into().unwrap();
                for ii in 0..MR {
                    for jj in 0..NR {
                        acc[ii][jj] += av[ii] * bv[jj];
                    }
                }
            }
            for (ii, tile) in acc.iter().enumerate() {
                dst[(r + ii) * n + j..][..NR].copy_from_slice(tile);
            }
            j += NR;
        }
        if j < n {
            tn_scalar(a, b, m, n, col, MR, j, ks.clone(), &mut dst[r * n..(r + MR) * n]);
        }
        r += MR;
    }
    if r < rows {
        tn_scalar(a, b, m, n, first + r, rows - r, 0, ks, &mut dst[r * n..]);
    }
}

#[allow(clippy::too_many_arguments)]
fn tn_scalar<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    n: usize,
    col: usize,
    count: usize,
    from: usize,
    ks: std::ops::Range<usize>,
    dst: &mut [T],
) {
    for kk in ks {
        let brow = &b[kk * n + from..(kk + 1) * n];
        for ii in 0..count {
            let av = a[kk * m + col + ii];
            for (d, &bv) in dst[ii * n + from..(ii + 1) * n].iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
}

/// Fills output rows `first..first + dst.len() / n` with register tiles of
/// `MR x NR`; leftovers take a scalar path with the same summation order.
fn matmul_rows<T: Real>(a: &[T], b: &[T], k: usize, n: usize, first: usize, dst: &mut [T]) {
    let rows = dst.len() / n;
    let row = |i: usize| &a[(first + i) * k..(first + i + 1) * k];
    let mut r = 0;
    while r + MR <= rows {
        let ar: [&[T]; MR] = std::array::from_fn(|ii| row(r + ii));
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for (kk, brow) in b.chunks_exact(n).enumerate() {
                let bv: &[T; NR] = brow[j..j + NR].try_into().unwrap();
                for ii in 0..MR {
                    let av = ar[ii][kk];
                    for jj in 0..NR {
                        acc[ii][jj] += av * bv[jj];
                    }
                }
            }
            for (ii, tile) in acc.iter().enumerate() {
                dst[(r + ii) * n + j..(r + ii) * n + j + NR].copy_from_slice(tile);
            }
            j += NR;
        }
        for ii in 0..MR {
            scalar_row(ar[ii], b, n, j, &mut dst[(r + ii) * n..(r + ii + 1) * n]);
        }
        r += MR;
    }
    for i in r..rows {
        scalar_row(row(i), b, n, 0, &mut dst[i * n..(i + 1) * n]);
    }
}

fn scalar_row<T: Real>(a: &[T], b: &[T], n: usize, from: usize, dst: &mut [T]) {
    if from == n {
        return;
    }
    for (kk, &av) in a.iter().enumerate() {
        for (d, &bv) in dst[from..].iter_mut().zip(&b[kk * n + from..(kk + 1) * n]) {
            *d += av * bv;
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Forward convolution: `sum_{ky,kx,ci} x * w`, then `+ bias`.
pub fn conv2d_forward<T: Real>(input: &[T], kernel: &[T], bias: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = im2col(input, g);
    let rows = g.batch * g.positions();
    let mut out = matmul(&cols, kernel, rows, g.patch_len(), g.out_c);
    for row in out.chunks_mut(g.out_c) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads<T> {
    let rows = g.batch * g.positions();
    let patch = g.patch_len();
    let cols = im2col(input, g);
    let kernel_grad = matmul_tn(&cols, grad_out, patch, rows, g.out_c);
    let mut bias_grad = vec![T::zero(); g.out_c];
    for row in grad_out.chunks(g.out_c) {
        for (b, &d) in bias_grad.iter_mut().zip(row) {
            *b += d;
        }
    }
    let input_grad = need_input.then(|| {
        let kernel_t = transpose(kernel, patch, g.out_c);
        let dcols = matmul(grad_out, &kernel_t, rows, g.out_c, patch);
        col2im(&dcols, g)
    });
    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    }
}

/// Geometry of a valid-padding 2-D pooling window over an NHWC batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], window: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        let &[batch, in_h, in_w, channels] = input else {
            return Err(Error::shape(format!(
                "pooling input must be [N, H, W, C], got {input:?}"
            )));
        };
        let (win_h, win_w) = window;
        let (stride_h, stride_w) = stride;
        if win_h == 0 || win_w == 0 || stride_h == 0 || stride_w == 0 {
            return Err(Error::config("pooling window and stride must be positive"));
        }
        if win_h > in_h || win_w > in_w {
            return Err(Error::shape(format!(
                "pooling window {win_h}x{win_w} exceeds input {in_h}x{in_w}"
            )));
        }
        Ok(PoolGeometry {
            batch,
            in_h,
            in_w,
            channels,
            win_h,
            win_w,
            stride_h,
            stride_w,
            out_h: (in_h - win_h) / stride_h + 1,
            out_w: (in_w - win_w) / stride_w + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.channels]
    }

    fn input_index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.in_h + y) * self.in_w + x) * self.channels + c
    }
}

/// Window maxima plus the flat input index of each maximum (first one on ties).
pub fn maxpool_forward<T: Real>(input: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let [n_, oh, ow, ch] = g.output_shape();
    let mut out = vec![T::zero(); n_ * oh * ow * ch];
    let mut argmax = vec![0usize; out.len()];
    let cells = out.chunks_exact_mut(ch).zip(argmax.chunks_exact_mut(ch));
    for (cell, (vals, idxs)) in cells.enumerate() {
        let n = cell / (oh * ow);
        let (oy, ox) = ((cell / ow) % oh, cell % ow);
        let (y0, x0) = (oy * g.stride_h, ox * g.stride_w);
        let start = g.input_index(n, y0, x0, 0);
        vals.copy_from_slice(&input[start..start + ch]);
        for (i, idx) in idxs.iter_mut().enumerate() {
            *idx = start + i;
        }
        for wy in 0..g.win_h {
            for wx in 0..g.win_w {
                let off = g.input_index(n, y0 + wy, x0 + wx, 0);
                let src = &input[off..off + ch];
                for (c, (&v, (best, idx))) in src.iter().zip(vals.iter_mut().zip(idxs.iter_mut())).enumerate() {
                    if v > *best {
                        *best = v;
                        *idx = off + c;
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub fn avgpool_forward<T: Real>(input: &[T], g: &PoolGeometry) -> Vec<T> {
    let [n_, oh, ow, ch] = g.output_shape();
    let scale = T::one() / T::lit((g.win_h * g.win_w) as f64);
    let mut out = Vec::with_capacity(n_ * oh * ow * ch);
    for n in 0..n_ {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..ch {
                    let mut acc = T::zero();
                    for wy in 0..g.win_h {
                        for wx in 0..g.win_w {
                            acc += input
                                [g.input_index(n, oy * g.stride_h + wy, ox * g.stride_w + wx, c)];
                        }
                    }
                    out.push(acc * scale);
                }
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Real>(grad_out: &[T], g: &PoolGeometry) -> Vec<T> {
    let [_, oh, ow, ch] = g.output_shape();
    let scale = T::one() / T::lit((g.win_h * g.win_w) as f64);
    let mut grad = vec![T::zero(); g.batch * g.in_h * g.in_w * ch];
    let mut i = 0;
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..ch {
                    let d = grad_out[i] * scale;
                    i += 1;
                    for wy in 0..g.win_h {
                        for wx in 0..g.win_w {
                            grad[g.input_index(n, oy * g.stride_h + wy, ox * g.stride_w + wx, c)] +=
                                d;
                        }
                    }
                }
            }
        }
    }
    grad
}
