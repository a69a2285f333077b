use std::sync::Arc;

use super::kernels::{self, Conv2dGeom};
use super::param::{ParamId, ParamStore};
use super::scalar::{gemm, Mat, Scalar};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Reshape(Var),
    TransposeLast2 { x: Var, batch: usize, rows: usize, cols: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    Glu { x: Var, outer: usize, half: usize, inner: usize },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    AddPositions { x: Var, table: Var, batch: usize, n: usize, dim: usize, offset: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dGeom, batch: usize },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    CausalConv1d { x: Var, w: Var, b: Var, batch: usize, n: usize, c_in: usize, c_out: usize, k: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, probs: Vec<S>, count: usize, k: usize },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// A tape is single-threaded and short-lived: build one per training step (or
/// per decoding step), run the forward pass through its methods, then call
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: Vec<(ParamId, Var)>,
}

/// Adjoints produced by [`Tape::backward`], one per recorded value that
/// requires a gradient.
#[derive(Debug)]
pub struct Gradients<S: Scalar = f32> {
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter adjoint into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for &(id, var) in &self.params {
            if let Some(g) = self.get(var) {
                store.get_mut(id).value.accumulate_grad(g);
            }
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// Records an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad();
        self.push(Tensor::from_parts(t.shape().to_vec(), t.shared().clone()), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Tensor::from_parts(t.shape().to_vec(), t.shared().clone()), Op::Leaf, false)
    }

    /// Records a parameter without copying its buffer.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let t = store.value(id);
        let v = self.push(Tensor::from_parts(t.shape().to_vec(), t.shared().clone()), Op::Param, true);
        self.params.push((id, v));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, Arc::new(data)), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, Arc::new(data)), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", format!("needs rank >= 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = shape[..shape.len() - 2].iter().product::<usize>();
        let src = self.data(x);
        let mut out = vec![S::zero(); src.len()];
        transpose_into(src, batch, rows, cols, &mut out);
        let mut new_shape = shape;
        let r = new_shape.len();
        new_shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(new_shape, Arc::new(out)), Op::TransposeLast2 { x, batch, rows, cols }, rg))
    }

    /// `y = x·wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?} with weight {ws:?}")));
        }
        let (out, inp) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape("linear", format!("bias {:?} for {out} outputs", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut y = vec![S::zero(); rows * out];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(Mat::new(self.data(x), rows, inp), Mat::t(self.data(w), out, inp), &mut y, b.is_some());
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(shape, Arc::new(y)), Op::Linear { x, w, b, rows, inp, out }, rg))
    }

    /// Batched product `[B, M, K]·[B, K, N]`, or `[B, M, K]·[B, N, K]ᵀ` when
    /// `trans_b` is set. Rank-2 operands are treated as `B = 1`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let err = || Error::shape("bmm", format!("{as_:?} x {bs:?} (trans_b = {trans_b})"));
        if as_.len() != bs.len() || !(2..=3).contains(&as_.len()) {
            return Err(err());
        }
        let (batch, m, k) = if as_.len() == 3 { (as_[0], as_[1], as_[2]) } else { (1, as_[0], as_[1]) };
        let (bb, b_rows, b_cols) = if bs.len() == 3 { (bs[0], bs[1], bs[2]) } else { (1, bs[0], bs[1]) };
        let (kb, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
        if bb != batch || kb != k {
            return Err(err());
        }
        let mut out = vec![S::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            let am = Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k);
            let bslice = &bd[i * k * n..(i + 1) * k * n];
            let bm = if trans_b { Mat::t(bslice, n, k) } else { Mat::new(bslice, k, n) };
            gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let shape = if as_.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, Arc::new(out)), Op::Bmm { a, b, batch, m, k, n, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape("matmul", format!("lhs {:?} is not a matrix", self.shape(a))));
        }
        self.bmm(a, b, false)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let mut out = vec![S::zero(); self.value(x).numel()];
        kernels::softmax_forward(self.data(x), outer, n, inner, &mut out);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, Arc::new(out)), Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Gated linear unit: splits `axis` into halves `[A; B]` and returns
    /// `A * sigmoid(B)`.
    pub fn glu(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("glu", format!("axis {axis} of {shape:?}")));
        }
        if !shape[axis].is_multiple_of(2) {
            return Err(Error::shape("glu", format!("axis {axis} of {shape:?} has odd extent")));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let half = n / 2;
        let src = self.data(x);
        let mut out = vec![S::zero(); outer * half * inner];
        for o in 0..outer {
            for d in 0..half {
                for i in 0..inner {
                    let a = src[(o * n + d) * inner + i];
                    let b = src[(o * n + d + half) * inner + i];
                    out[(o * half + d) * inner + i] = a * kernels::sigmoid(b);
                }
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = half;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(new_shape, Arc::new(out)), Op::Glu { x, outer, half, inner }, rg))
    }

    /// Gathers rows of a `[V, D]` table; the result has shape `lead ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding", format!("table {ts:?} is not a matrix")));
        }
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", format!("{} ids for lead shape {lead:?}", ids.len())));
        }
        let (rows, dim) = (ts[0], ts[1]);
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= rows) {
            return Err(Error::IndexOutOfRange { id, position, rows });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let mut shape = lead.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push(Tensor::from_parts(shape, Arc::new(out)), Op::Embedding { table, ids: ids.to_vec(), dim }, rg))
    }

    /// Adds row `i` of a `[P, D]` table to position `i` of `x: [.., N, D]`.
    pub fn add_positions(&mut self, x: Var, table: Var) -> Result<Var> {
        self.add_positions_from(x, table, 0)
    }

    /// Like [`Tape::add_positions`] but position `i` of `x` receives table
    /// row `offset + i`.
    pub fn add_positions_from(&mut self, x: Var, table: Var, offset: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ts = self.shape(table).to_vec();
        if xs.len() < 2 || ts.len() != 2 || xs[xs.len() - 1] != ts[1] {
            return Err(Error::shape("add_positions", format!("{xs:?} with table {ts:?}")));
        }
        let (n, dim) = (xs[xs.len() - 2], ts[1]);
        if offset + n > ts[0] {
            return Err(Error::TooLong { len: offset + n, limit: ts[0] });
        }
        let batch = xs[..xs.len() - 2].iter().product::<usize>();
        let mut out = self.data(x).to_vec();
        let tab = &self.data(table)[offset * dim..(offset + n) * dim];
        if n * dim > 0 {
            for chunk in out.chunks_mut(n * dim) {
                chunk.iter_mut().zip(tab).for_each(|(o, t)| *o += *t);
            }
        }
        let rg = self.rg(x) || self.rg(table);
        Ok(self.push(Tensor::from_parts(xs, Arc::new(out)), Op::AddPositions { x, table, batch, n, dim, offset }, rg))
    }

    /// Cross-correlation of `[C, H, W]` (or `[B, C, H, W]`) with a
    /// `[C_out, C_in, kh, kw]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, c_in, h, wd) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => return Err(Error::shape("conv2d", format!("input {xs:?} is not [C,H,W] or [B,C,H,W]"))),
        };
        if ws.len() != 4 || ws[1] != c_in {
            return Err(Error::shape("conv2d", format!("weight {ws:?} for input channels {c_in}")));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, wd + 2 * padding),
            ));
        }
        let geom = Conv2dGeom {
            c_in,
            h,
            w: wd,
            c_out: ws[0],
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (wd + 2 * padding - kw) / stride + 1,
        };
        let mut out = vec![S::zero(); batch * geom.c_out * geom.out_plane()];
        kernels::conv2d_forward(self.data(x), self.data(w), self.data(b), &geom, batch, &mut out);
        let shape = if xs.len() == 3 {
            vec![geom.c_out, geom.h_out, geom.w_out]
        } else {
            vec![batch, geom.c_out, geom.h_out, geom.w_out]
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, Arc::new(out)), Op::Conv2d { x, w, b, geom, batch }, rg))
    }

    /// Non-overlapping max pooling over the last two axes.
    pub fn maxpool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || kh == 0 || kw == 0 {
            return Err(Error::shape("maxpool2d", format!("input {xs:?} with window {kh}x{kw}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        if h % kh != 0 {
            return Err(Error::shape("maxpool2d", format!("height {h} is not divisible by {kh}")));
        }
        if w % kw != 0 {
            return Err(Error::shape("maxpool2d", format!("width {w} is not divisible by {kw}")));
        }
        let planes = xs[..xs.len() - 2].iter().product::<usize>();
        let mut out = vec![S::zero(); planes * (h / kh) * (w / kw)];
        let argmax = kernels::maxpool2d_forward(self.data(x), planes, h, w, kh, kw, &mut out);
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = h / kh;
        shape[r - 1] = w / kw;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, Arc::new(out)), Op::MaxPool2d { x, argmax }, rg))
    }

    /// Causal 1-D convolution on a time-major `[N, C_in]` (or `[B, N, C_in]`)
    /// sequence with a `[C_out, C_in, k]` kernel. Output position `i` reads
    /// input positions `i-k+1 ..= i`; earlier positions are zeros.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, n, c_in) = match xs.len() {
            2 => (1, xs[0], xs[1]),
            3 => (xs[0], xs[1], xs[2]),
            _ => return Err(Error::shape("causal_conv1d", format!("input {xs:?} is not [N,C] or [B,N,C]"))),
        };
        if ws.len() != 3 || ws[1] != c_in || ws[2] == 0 {
            return Err(Error::shape("causal_conv1d", format!("weight {ws:?} for input channels {c_in}")));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if self.shape(b) != [c_out] {
            return Err(Error::shape("causal_conv1d", format!("bias {:?} for {c_out} outputs", self.shape(b))));
        }
        let rows = kernels::causal_weight_rows(self.data(w), c_out, c_in, k);
        let mut col = vec![S::zero(); n * k * c_in];
        let mut out = vec![S::zero(); batch * n * c_out];
        let bias = self.data(b);
        for row in out.chunks_mut(c_out) {
            row.copy_from_slice(bias);
        }
        let src = self.data(x);
        for bi in 0..batch {
            kernels::causal_im2col(&src[bi * n * c_in..(bi + 1) * n * c_in], n, c_in, k, &mut col);
            gemm(
                Mat::new(&col, n, k * c_in),
                Mat::t(&rows, c_out, k * c_in),
                &mut out[bi * n * c_out..(bi + 1) * n * c_out],
                true,
            );
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = c_out;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(shape, Arc::new(out)),
            Op::CausalConv1d { x, w, b, batch, n, c_in, c_out, k },
            rg,
        ))
    }

    /// Causal convolution on a channel-major `[C_in, N]` sequence, returning
    /// `[C_out, N]`.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("conv1d_causal", format!("input {:?} is not [C,N]", self.shape(x))));
        }
        let xt = self.transpose(x)?;
        let y = self.causal_conv1d(xt, w, b)?;
        self.transpose(y)
    }

    /// Mean over non-ignored rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(Error::shape("cross_entropy", format!("logits {ls:?} for {} targets", targets.len())));
        }
        let k = ls[1];
        let x = self.data(logits);
        let mut probs = vec![S::zero(); x.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= k {
                return Err(Error::IndexOutOfRange { id: t, position: i, rows: k });
            }
            let row = &x[i * k..(i + 1) * k];
            let prow = &mut probs[i * k..(i + 1) * k];
            kernels::softmax_forward(row, 1, k, 1, prow);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            total += (lse - row[t]).as_f64();
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let loss = S::of(total / count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs, count, k },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 || self.value(loss).rank() > 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![S::zero(); node.value.numel()]);
            }
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    /// Runs [`Tape::backward`] and adds parameter adjoints into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        macro_rules! with_slot {
            ($v:expr, |$d:ident| $body:expr) => {
                if let Some($d) = slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                with_slot!(*a, |d| add_into(d, g));
                with_slot!(*b, |d| add_into(d, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with_slot!(*a, |d| for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                });
                with_slot!(*b, |d| for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                });
            }
            Op::Scale(x, c) => {
                with_slot!(*x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += *g * *c));
            }
            Op::Relu(x) => {
                let xv = val(*x);
                with_slot!(*x, |d| for i in 0..d.len() {
                    if xv[i] > S::zero() {
                        d[i] += g[i];
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = nodes[idx].value.data();
                with_slot!(*x, |d| for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (S::one() - y[i]);
                });
            }
            Op::Sum(x) => {
                with_slot!(*x, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Reshape(x) => {
                with_slot!(*x, |d| add_into(d, g));
            }
            Op::TransposeLast2 { x, batch, rows, cols } => {
                with_slot!(*x, |d| {
                    let mut back = vec![S::zero(); g.len()];
                    transpose_into(g, *batch, *cols, *rows, &mut back);
                    add_into(d, &back);
                });
            }
            Op::Linear { x, w, b, rows, inp, out } => {
                let (rows, inp, out) = (*rows, *inp, *out);
                with_slot!(*x, |d| gemm(Mat::new(g, rows, out), Mat::new(val(*w), out, inp), d, true));
                with_slot!(*w, |d| gemm(Mat::t(g, rows, out), Mat::new(val(*x), rows, inp), d, true));
                if let Some(b) = b {
                    with_slot!(*b, |d| for row in g.chunks(out) {
                        add_into(d, row);
                    });
                }
            }
            Op::Bmm { a, b, batch, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                with_slot!(*a, |d| for i in 0..*batch {
                    let gi = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    let bs = &bv[i * k * n..(i + 1) * k * n];
                    let bm = if *trans_b { Mat::new(bs, n, k) } else { Mat::t(bs, k, n) };
                    gemm(gi, bm, &mut d[i * m * k..(i + 1) * m * k], true);
                });
                with_slot!(*b, |d| for i in 0..*batch {
                    let gs = &g[i * m * n..(i + 1) * m * n];
                    let as_ = &av[i * m * k..(i + 1) * m * k];
                    let di = &mut d[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm(Mat::t(gs, m, n), Mat::new(as_, m, k), di, true);
                    } else {
                        gemm(Mat::t(as_, m, k), Mat::new(gs, m, n), di, true);
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = nodes[idx].value.data();
                with_slot!(*x, |d| kernels::softmax_backward(y, g, *outer, *n, *inner, d));
            }
            Op::Glu { x, outer, half, inner } => {
                let src = val(*x);
                let (half, inner) = (*half, *inner);
                let n = 2 * half;
                with_slot!(*x, |d| for o in 0..*outer {
                    for c in 0..half {
                        for i in 0..inner {
                            let ia = (o * n + c) * inner + i;
                            let ib = (o * n + c + half) * inner + i;
                            let gy = g[(o * half + c) * inner + i];
                            let s = kernels::sigmoid(src[ib]);
                            d[ia] += gy * s;
                            d[ib] += gy * src[ia] * s * (S::one() - s);
                        }
                    }
                });
            }
            Op::Embedding { table, ids, dim } => {
                let dim = *dim;
                with_slot!(*table, |d| for (p, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * dim..(id + 1) * dim], &g[p * dim..(p + 1) * dim]);
                });
            }
            Op::AddPositions { x, table, batch, n, dim, offset } => {
                with_slot!(*x, |d| add_into(d, g));
                let (span, start) = (*n * *dim, *offset * *dim);
                with_slot!(*table, |d| for bi in 0..*batch {
                    add_into(&mut d[start..start + span], &g[bi * span..(bi + 1) * span]);
                });
            }
            Op::Conv2d { x, w, b, geom, batch } => {
                let mut dx = take_slot(nodes, grads, *x);
                let mut dw = take_slot(nodes, grads, *w);
                let mut db = take_slot(nodes, grads, *b);
                kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    geom,
                    *batch,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, buf) in [(*x, dx), (*w, dw), (*b, db)] {
                    if buf.is_some() {
                        grads[v.0] = buf;
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                with_slot!(*x, |d| for (o, &src) in argmax.iter().enumerate() {
                    d[src as usize] += g[o];
                });
            }
            Op::CausalConv1d { x, w, b, batch, n, c_in, c_out, k } => {
                let (n, c_in, c_out, k) = (*n, *c_in, *c_out, *k);
                let kc = k * c_in;
                with_slot!(*b, |d| for row in g.chunks(c_out) {
                    add_into(d, row);
                });
                let xv = val(*x);
                let mut col = vec![S::zero(); n * kc];
                if nodes[w.0].requires_grad {
                    let mut drows = vec![S::zero(); c_out * kc];
                    for bi in 0..*batch {
                        kernels::causal_im2col(&xv[bi * n * c_in..(bi + 1) * n * c_in], n, c_in, k, &mut col);
                        gemm(
                            Mat::t(&g[bi * n * c_out..(bi + 1) * n * c_out], n, c_out),
                            Mat::new(&col, n, kc),
                            &mut drows,
                            true,
                        );
                    }
                    with_slot!(*w, |d| kernels::causal_weight_rows_adjoint(&drows, c_out, c_in, k, d));
                }
                if nodes[x.0].requires_grad {
                    let rows = kernels::causal_weight_rows(val(*w), c_out, c_in, k);
                    with_slot!(*x, |d| for bi in 0..*batch {
                        gemm(
                            Mat::new(&g[bi * n * c_out..(bi + 1) * n * c_out], n, c_out),
                            Mat::new(&rows, c_out, kc),
                            &mut col,
                            false,
                        );
                        kernels::causal_col2im(&col, n, c_in, k, &mut d[bi * n * c_in..(bi + 1) * n * c_in]);
                    });
                }
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count, k } => {
                let k = *k;
                let scale = g[0] / S::of(*count as f64);
                with_slot!(*logits, |d| for (i, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    let row = &mut d[i * k..(i + 1) * k];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r += scale * probs[i * k + j];
                    }
                    row[t] -= scale;
                });
            }
        }
    }
}

fn slot<'g, S: Scalar>(nodes: &[Node<S>], grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut [S]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]).as_mut_slice())
}

fn take_slot<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], v: Var) -> Option<Vec<S>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].take().unwrap_or_else(|| vec![S::zero(); nodes[v.0].value.numel()]))
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

fn transpose_into<S: Scalar>(src: &[S], batch: usize, rows: usize, cols: usize, dst: &mut [S]) {
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut dst[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
}
