//! Slice-level kernels shared by the tape's forward and backward passes.

use super::scalar::{gemm, Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1x1, stride-1, unpadded convolution reads the input directly as its
    /// patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, H'*W']` patch matrix.
fn im2col<S: Scalar>(x: &[S], g: &Conv2dGeom, col: &mut [S]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let y = (oy * g.stride) as isize - pad + i as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if y < 0 || y >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let srow = &src[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = (ox * g.stride) as isize - pad + j as isize;
                        *v = if xx < 0 || xx >= g.w as isize { S::zero() } else { srow[xx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back into the image.
fn col2im<S: Scalar>(col: &[S], g: &Conv2dGeom, dx: &mut [S]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let y = (oy * g.stride) as isize - pad + i as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let xx = (ox * g.stride) as isize - pad + j as isize;
                        if xx >= 0 && xx < g.w as isize {
                            drow[xx as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(
    x: &[S],
    weight: &[S],
    bias: &[S],
    g: &Conv2dGeom,
    batch: usize,
    out: &mut [S],
) {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_plane();
    let k = g.patch_len();
    let plane = g.out_plane();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); k * plane] };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        for (co, row) in ob.chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        let patches = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        gemm(Mat::new(weight, g.c_out, k), Mat::new(patches, k, plane), ob, true);
    }
}

/// Accumulates into whichever of `dx`, `dw`, `db` are requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    dout: &[S],
    g: &Conv2dGeom,
    batch: usize,
    mut dx: Option<&mut [S]>,
    mut dw: Option<&mut [S]>,
    mut db: Option<&mut [S]>,
) {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_plane();
    let k = g.patch_len();
    let plane = g.out_plane();
    let mut col = vec![S::zero(); k * plane];
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gb = &dout[b * out_len..(b + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in gb.chunks(plane).enumerate() {
                db[co] += row.iter().copied().sum::<S>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let patches: &[S] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            gemm(Mat::new(gb, g.c_out, plane), Mat::t(patches, k, plane), dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(Mat::t(weight, g.c_out, k), Mat::new(gb, g.c_out, plane), dxb, true);
            } else {
                gemm(Mat::t(weight, g.c_out, k), Mat::new(gb, g.c_out, plane), &mut col, false);
                col2im(&col, g, dxb);
            }
        }
    }
}

/// Max over non-overlapping `kh x kw` windows of each `[H, W]` plane.
/// Returns, per output cell, the flat input index of the first maximum in
/// row-major window order.
pub(crate) fn maxpool2d_forward<S: Scalar>(
    x: &[S],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out: &mut [S],
) -> Vec<u32> {
    let (ho, wo) = (h / kh, w / kw);
    let mut argmax = vec![0u32; planes * ho * wo];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * kh * w + ox * kw;
                let mut best_v = x[best];
                for i in 0..kh {
                    for j in 0..kw {
                        let idx = base + (oy * kh + i) * w + ox * kw + j;
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out[o] = best_v;
                argmax[o] = best as u32;
            }
        }
    }
    argmax
}

/// Unfolds a time-major `[N, C]` sequence into `[N, k*C]` rows, where row `i`
/// is the concatenation of positions `i-k+1 ..= i` (zeros before the start).
pub(crate) fn causal_im2col<S: Scalar>(x: &[S], n: usize, c: usize, k: usize, col: &mut [S]) {
    for i in 0..n {
        let row = &mut col[i * k * c..(i + 1) * k * c];
        for t in 0..k {
            let dst = &mut row[t * c..(t + 1) * c];
            let src = i as isize + t as isize - (k as isize - 1);
            if src < 0 {
                dst.iter_mut().for_each(|v| *v = S::zero());
            } else {
                let s = src as usize;
                dst.copy_from_slice(&x[s * c..(s + 1) * c]);
            }
        }
    }
}

pub(crate) fn causal_col2im<S: Scalar>(col: &[S], n: usize, c: usize, k: usize, dx: &mut [S]) {
    for i in 0..n {
        let row = &col[i * k * c..(i + 1) * k * c];
        for t in 0..k {
            let src = i as isize + t as isize - (k as isize - 1);
            if src < 0 {
                continue;
            }
            let s = src as usize;
            for (d, v) in dx[s * c..(s + 1) * c].iter_mut().zip(&row[t * c..(t + 1) * c]) {
                *d += *v;
            }
        }
    }
}

/// Reorders a `[C_out, C_in, k]` kernel into `[C_out, k*C_in]` so that it
/// lines up with [`causal_im2col`] rows.
pub(crate) fn causal_weight_rows<S: Scalar>(w: &[S], c_out: usize, c_in: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); c_out * c_in * k];
    for co in 0..c_out {
        for ci in 0..c_in {
            for t in 0..k {
                out[co * k * c_in + t * c_in + ci] = w[(co * c_in + ci) * k + t];
            }
        }
    }
    out
}

pub(crate) fn causal_weight_rows_adjoint<S: Scalar>(rows: &[S], c_out: usize, c_in: usize, k: usize, dw: &mut [S]) {
    for co in 0..c_out {
        for ci in 0..c_in {
            for t in 0..k {
                dw[(co * c_in + ci) * k + t] += rows[co * k * c_in + t * c_in + ci];
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<S: Scalar>(x: &[S], outer: usize, n: usize, inner: usize, out: &mut [S]) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut max = S::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut sum = S::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            let inv = S::one() / sum;
            for j in 0..n {
                out[at(j)] *= inv;
            }
        }
    }
}

pub(crate) fn softmax_backward<S: Scalar>(y: &[S], dy: &[S], outer: usize, n: usize, inner: usize, dx: &mut [S]) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut dot = S::zero();
            for j in 0..n {
                dot += y[at(j)] * dy[at(j)];
            }
            for j in 0..n {
                dx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}
