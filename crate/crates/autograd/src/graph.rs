//! The tape and its differentiable operations.
//!
//! Layout conventions: a 2-D tensor is `[rows, cols]`. Row-wise operations
//! (softmax, layer norm, row broadcast) view any tensor as
//! `[len / cols, cols]` using the trailing dimension; channel-wise operations
//! (column broadcast) view it as `[rows, len / rows]` using the leading one.
//! 1-D convolutions take `[channels, time]`, 2-D convolutions
//! `[channels, height, width]`.

use crate::params::ParamGrads;
use crate::tensor::{gemm_nt, gemm_tn};
use crate::{Error, ParamId, ParamStore, Result, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Silu,
    Gelu,
    Sigmoid,
    Tanh,
    Square,
    Exp,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Sum(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize },
    ConvT1d { x: Var, w: Var, b: Option<Var>, stride: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample2x(Var),
    ResizeLast(Var),
    Custom { x: Var, grad: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of tensor operations.
pub struct Graph<'p, T: Scalar> {
    store: Option<&'p ParamStore<T>>,
    train_params: bool,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one scalar with respect to every node of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err<R>(msg: String) -> Result<R> {
    Err(Error::Shape(msg))
}

fn conv_out(len: usize, pad_total: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = len + pad_total;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

impl<T: Scalar> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<'static, T> {
    /// A graph with no parameter store.
    pub fn new() -> Self {
        Self {
            store: None,
            train_params: false,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph reading weights from `store`; gradients flow into the
    /// parameters only when `train_params` is set.
    pub fn with_params(store: &'p ParamStore<T>, train_params: bool) -> Self {
        Self {
            store: Some(store),
            train_params,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is wanted.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The node holding parameter `id`; created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let store = self.store.expect("graph has no parameter store");
        let value = store.get(id).clone();
        let v = self.push(value, Op::Leaf, self.train_params);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ----- elementwise -----

    fn binary_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::Shift(a), ng)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f = |x: T| -> T {
            match kind {
                Unary::Silu => x * sigmoid(x),
                Unary::Gelu => gelu(x),
                Unary::Sigmoid => sigmoid(x),
                Unary::Tanh => x.tanh(),
                Unary::Square => x * x,
                Unary::Exp => x.exp(),
            }
        };
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, Op::Unary(a, kind), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    // ----- linear algebra and layout -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    fn check_row_vec(&self, a: Var, v: Var) -> Result<(usize, usize)> {
        let cols = self.value(a).cols();
        let n = self.value(a).len();
        if self.value(v).len() != cols || cols == 0 {
            return shape_err(format!(
                "row broadcast of {:?} over {:?}",
                self.shape(v),
                self.shape(a)
            ));
        }
        Ok((n / cols, cols))
    }

    fn check_col_vec(&self, a: Var, v: Var) -> Result<(usize, usize)> {
        let rows = self.value(a).rows();
        let n = self.value(a).len();
        if self.value(v).len() != rows || rows == 0 {
            return shape_err(format!(
                "column broadcast of {:?} over {:?}",
                self.shape(v),
                self.shape(a)
            ));
        }
        Ok((rows, n / rows))
    }

    /// `a[i, j] + v[j]` over the trailing dimension.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, cols) = self.check_row_vec(a, v)?;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += vv[i % cols];
        }
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(out, Op::AddRow(a, v), ng))
    }

    /// `a[i, j] * v[j]` over the trailing dimension.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, cols) = self.check_row_vec(a, v)?;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= vv[i % cols];
        }
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(out, Op::MulRow(a, v), ng))
    }

    /// `a[c, ...] + v[c]` over the leading dimension.
    pub fn add_col(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, inner) = self.check_col_vec(a, v)?;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += vv[i / inner];
        }
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(out, Op::AddCol(a, v), ng))
    }

    /// `a[c, ...] * v[c]` over the leading dimension.
    pub fn mul_col(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, inner) = self.check_col_vec(a, v)?;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= vv[i / inner];
        }
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(out, Op::MulCol(a, v), ng))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Normalizes every row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let cols = x.cols().max(1);
        let rows = x.len() / cols;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(rows);
        let n = T::lit(cols as f64);
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols().max(1);
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols().max(1);
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 || start > end || end > x.cols() {
            return shape_err(format!("slice_cols {start}..{end} of {:?}", x.shape()));
        }
        let (rows, cols) = (x.rows(), x.cols());
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * cols + start..r * cols + end]);
        }
        let t = Tensor::from_vec(&[rows, w], out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceCols { x: a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols of nothing".into());
        };
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return shape_err(format!("concat_cols part {s:?} with {rows} rows"));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let x = self.value(p);
                let c = x.cols();
                out.extend_from_slice(&x.data()[r * c..(r + 1) * c]);
            }
        }
        let t = Tensor::from_vec(&[rows, total], out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `[start, end)` along the leading dimension.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() || x.ndim() == 0 {
            return shape_err(format!("slice_rows {start}..{end} of {:?}", x.shape()));
        }
        let inner = x.len() / x.rows().max(1);
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor::from_vec(&shape, x.data()[start * inner..end * inner].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceRows { x: a, start }, ng))
    }

    /// Concatenation along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows of nothing".into());
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            if x.shape()[1..] != tail[..] {
                return shape_err(format!("concat_rows {:?} with tail {tail:?}", x.shape()));
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let t = Tensor::from_vec(&shape, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    // ----- convolutions -----

    /// Grouped 1-D convolution with symmetric zero padding.
    ///
    /// `x: [c_in, len]`, `w: [c_out, c_in / groups, k]`, `b: [c_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.ndim() != 2 || wv.ndim() != 3 || groups == 0 {
            return shape_err(format!("conv1d x {:?} w {:?}", xv.shape(), wv.shape()));
        }
        let (cin, len) = (xv.shape()[0], xv.shape()[1]);
        let (cout, cig, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if cin % groups != 0 || cout % groups != 0 || cig != cin / groups {
            return shape_err(format!(
                "conv1d groups {groups}: x {:?} w {:?}",
                xv.shape(),
                wv.shape()
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return shape_err(format!("conv1d bias {:?}", self.shape(b)));
            }
        }
        let Some(lout) = conv_out(len, 2 * pad, k, stride) else {
            return shape_err(format!("conv1d input length {len} too short for kernel {k}"));
        };
        let cog = cout / groups;
        let mut out = vec![T::zero(); cout * lout];
        let xd = xv.data();
        let wd = wv.data();
        for co in 0..cout {
            let g = co / cog;
            let orow = &mut out[co * lout..(co + 1) * lout];
            for ci in 0..cig {
                let xrow = &xd[(g * cig + ci) * len..(g * cig + ci + 1) * len];
                for kk in 0..k {
                    let wval = wd[(co * cig + ci) * k + kk];
                    if wval == T::zero() {
                        continue;
                    }
                    for (o, ov) in orow.iter_mut().enumerate() {
                        let idx = o * stride + kk;
                        if idx < pad || idx - pad >= len {
                            continue;
                        }
                        *ov += wval * xrow[idx - pad];
                    }
                }
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for co in 0..cout {
                for v in &mut out[co * lout..(co + 1) * lout] {
                    *v += bd[co];
                }
            }
        }
        let t = Tensor::from_vec(&[cout, lout], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            },
            ng,
        ))
    }

    /// Transposed 1-D convolution without padding.
    ///
    /// `x: [c_in, len]`, `w: [c_in, c_out, k]`; output length
    /// `(len - 1) * stride + k`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.ndim() != 2 || wv.ndim() != 3 || wv.shape()[0] != xv.shape()[0] || stride == 0 {
            return shape_err(format!(
                "conv_transpose1d x {:?} w {:?}",
                xv.shape(),
                wv.shape()
            ));
        }
        let (cin, len) = (xv.shape()[0], xv.shape()[1]);
        let (cout, k) = (wv.shape()[1], wv.shape()[2]);
        if len == 0 {
            return shape_err("conv_transpose1d of empty input".into());
        }
        let lout = (len - 1) * stride + k;
        let mut out = vec![T::zero(); cout * lout];
        let (xd, wd) = (xv.data(), wv.data());
        for ci in 0..cin {
            for co in 0..cout {
                for kk in 0..k {
                    let wval = wd[(ci * cout + co) * k + kk];
                    for i in 0..len {
                        out[co * lout + i * stride + kk] += wval * xd[ci * len + i];
                    }
                }
            }
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return shape_err(format!("conv_transpose1d bias {:?}", self.shape(b)));
            }
            let bd = self.value(b).data();
            for co in 0..cout {
                for v in &mut out[co * lout..(co + 1) * lout] {
                    *v += bd[co];
                }
            }
        }
        let t = Tensor::from_vec(&[cout, lout], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::ConvT1d { x, w, b, stride }, ng))
    }

    /// 2-D convolution with symmetric zero padding.
    ///
    /// `x: [c_in, h, w]`, `w: [c_out, c_in, kh, kw]`, `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.ndim() != 3 || wv.ndim() != 4 || wv.shape()[1] != xv.shape()[0] {
            return shape_err(format!("conv2d x {:?} w {:?}", xv.shape(), wv.shape()));
        }
        let (cin, h, wd_) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        let (Some(ho), Some(wo)) = (conv_out(h, 2 * pad, kh, stride), conv_out(wd_, 2 * pad, kw, stride)) else {
            return shape_err(format!("conv2d input {:?} too small", xv.shape()));
        };
        let mut out = vec![T::zero(); cout * ho * wo];
        let (xd, wdat) = (xv.data(), wv.data());
        for co in 0..cout {
            for ci in 0..cin {
                for a in 0..kh {
                    for c in 0..kw {
                        let wval = wdat[((co * cin + ci) * kh + a) * kw + c];
                        if wval == T::zero() {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = oh * stride + a;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let xrow = &xd[(ci * h + ih - pad) * wd_..(ci * h + ih - pad + 1) * wd_];
                            let orow = &mut out[(co * ho + oh) * wo..(co * ho + oh + 1) * wo];
                            if stride == 1 {
                                // ow + c - pad in [0, w)
                                let lo = pad.saturating_sub(c);
                                let hi = (wd_ + pad).saturating_sub(c).min(wo);
                                for ow in lo..hi {
                                    orow[ow] += wval * xrow[ow + c - pad];
                                }
                            } else {
                                for (ow, ov) in orow.iter_mut().enumerate() {
                                    let iw = ow * stride + c;
                                    if iw < pad || iw - pad >= wd_ {
                                        continue;
                                    }
                                    *ov += wval * xrow[iw - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return shape_err(format!("conv2d bias {:?}", self.shape(b)));
            }
            let bd = self.value(b).data();
            for co in 0..cout {
                for v in &mut out[co * ho * wo..(co + 1) * ho * wo] {
                    *v += bd[co];
                }
            }
        }
        let t = Tensor::from_vec(&[cout, ho, wo], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// Nearest-neighbour ×2 upsampling of `[c, h, w]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 3 {
            return shape_err(format!("upsample2x of {:?}", x.shape()));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(ch * 2 * h + i) * 2 * w + j] = x.data()[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[c, 2 * h, 2 * w], out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Upsample2x(a), ng))
    }

    /// Zero-pads or crops the trailing dimension to `new_len`.
    pub fn resize_last(&mut self, a: Var, new_len: usize) -> Result<Var> {
        let x = self.value(a);
        let old = x.cols();
        if x.ndim() == 0 || old == 0 {
            return shape_err(format!("resize_last of {:?}", x.shape()));
        }
        let outer = x.len() / old;
        let mut out = vec![T::zero(); outer * new_len];
        let keep = old.min(new_len);
        for r in 0..outer {
            out[r * new_len..r * new_len + keep].copy_from_slice(&x.data()[r * old..r * old + keep]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = new_len;
        let t = Tensor::from_vec(&shape, out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::ResizeLast(a), ng))
    }

    /// A scalar node whose value and gradient with respect to `x` were
    /// computed outside the tape.
    pub fn custom_scalar(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        self.value(x).check_same_shape(&grad)?;
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(value), Op::Custom { x, grad }, ng))
    }

    // ----- backward -----

    /// Gradients of the scalar `out` with respect to every node that needs one.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::Grad(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::ones(self.shape(out)));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `out` with respect to the parameters of the store.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        ParamGrads::from_vec(
            self.param_vars
                .iter()
                .map(|v| v.and_then(|v| grads.get(v).cloned()))
                .collect(),
        )
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.scale(*c))?,
            Op::Shift(a) => self.acc(grads, *a, g.clone())?,
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let d = Tensor::from_fn(x.shape(), |k| {
                    let (xv, yv) = (x.data()[k], y.data()[k]);
                    let dv = match kind {
                        Unary::Silu => {
                            let s = sigmoid(xv);
                            s * (T::one() + xv * (T::one() - s))
                        }
                        Unary::Gelu => gelu_grad(xv),
                        Unary::Sigmoid => yv * (T::one() - yv),
                        Unary::Tanh => T::one() - yv * yv,
                        Unary::Square => T::lit(2.0) * xv,
                        Unary::Exp => yv,
                    };
                    dv * g.data()[k]
                });
                self.acc(grads, *a, d)?;
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    self.acc(grads, *a, Tensor::from_vec(&[m, k], da)?)?;
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(av.data(), g.data(), &mut db, k, m, n);
                    self.acc(grads, *b, Tensor::from_vec(&[k, n], db)?)?;
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()?)?,
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                self.acc(grads, *a, g.clone().reshape(&s)?)?;
            }
            Op::AddRow(a, v) => {
                self.acc(grads, *a, g.clone())?;
                if self.ng(*v) {
                    let cols = g.cols();
                    let mut dv = vec![T::zero(); cols];
                    for (k, &gv) in g.data().iter().enumerate() {
                        dv[k % cols] += gv;
                    }
                    let s = self.shape(*v).to_vec();
                    self.acc(grads, *v, Tensor::from_vec(&s, dv)?)?;
                }
            }
            Op::MulRow(a, v) => {
                let cols = g.cols();
                let vv = self.value(*v).data();
                if self.ng(*a) {
                    let da = Tensor::from_fn(g.shape(), |k| g.data()[k] * vv[k % cols]);
                    self.acc(grads, *a, da)?;
                }
                if self.ng(*v) {
                    let av = self.value(*a).data();
                    let mut dv = vec![T::zero(); cols];
                    for (k, &gv) in g.data().iter().enumerate() {
                        dv[k % cols] += gv * av[k];
                    }
                    let s = self.shape(*v).to_vec();
                    self.acc(grads, *v, Tensor::from_vec(&s, dv)?)?;
                }
            }
            Op::AddCol(a, v) => {
                self.acc(grads, *a, g.clone())?;
                if self.ng(*v) {
                    let rows = g.rows();
                    let inner = g.len() / rows;
                    let dv: Vec<T> = (0..rows)
                        .map(|r| g.data()[r * inner..(r + 1) * inner].iter().copied().sum())
                        .collect();
                    let s = self.shape(*v).to_vec();
                    self.acc(grads, *v, Tensor::from_vec(&s, dv)?)?;
                }
            }
            Op::MulCol(a, v) => {
                let rows = g.rows();
                let inner = g.len() / rows;
                let vv = self.value(*v).data();
                if self.ng(*a) {
                    let da = Tensor::from_fn(g.shape(), |k| g.data()[k] * vv[k / inner]);
                    self.acc(grads, *a, da)?;
                }
                if self.ng(*v) {
                    let av = self.value(*a).data();
                    let dv: Vec<T> = (0..rows)
                        .map(|r| {
                            (r * inner..(r + 1) * inner)
                                .map(|k| g.data()[k] * av[k])
                                .sum()
                        })
                        .collect();
                    let s = self.shape(*v).to_vec();
                    self.acc(grads, *v, Tensor::from_vec(&s, dv)?)?;
                }
            }
            Op::Sum(a) => {
                let s = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::full(&s, g.data()[0]))?;
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = y.cols().max(1);
                let n = T::lit(cols as f64);
                let mut dx = vec![T::zero(); y.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for c in 0..cols {
                        dx[r * cols + c] = is * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                let s = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::from_vec(&s, dx)?)?;
            }
            Op::Softmax(a) => {
                let cols = y.cols().max(1);
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                let s = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::from_vec(&s, dx)?)?;
            }
            Op::LogSoftmax(a) => {
                let cols = y.cols().max(1);
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let gs = gr.iter().copied().sum::<T>();
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - yr[c].exp() * gs;
                    }
                }
                let s = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::from_vec(&s, dx)?)?;
            }
            Op::SliceCols { x, start } => {
                let xs = self.shape(*x).to_vec();
                let (rows, cols) = (xs[0], xs[1]);
                let w = g.cols();
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.acc(grads, *x, Tensor::from_vec(&xs, dx)?)?;
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * total + off..r * total + off + c]);
                        }
                        self.acc(grads, p, Tensor::from_vec(&[rows, c], dp)?)?;
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let xs = self.shape(*x).to_vec();
                let inner = self.value(*x).len() / xs[0].max(1);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                dx[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, Tensor::from_vec(&xs, dx)?)?;
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.ng(p) {
                        let s = self.shape(p).to_vec();
                        self.acc(grads, p, Tensor::from_vec(&s, g.data()[off..off + n].to_vec())?)?;
                    }
                    off += n;
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            } => self.conv1d_backward(g, *x, *w, *b, *stride, *pad, *groups, grads)?,
            Op::ConvT1d { x, w, b, stride } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (cin, len) = (xv.shape()[0], xv.shape()[1]);
                let (cout, k) = (wv.shape()[1], wv.shape()[2]);
                let lout = g.cols();
                let gd = g.data();
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); cin * len];
                    for ci in 0..cin {
                        for co in 0..cout {
                            for kk in 0..k {
                                let wval = wv.data()[(ci * cout + co) * k + kk];
                                for i in 0..len {
                                    dx[ci * len + i] += wval * gd[co * lout + i * stride + kk];
                                }
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::from_vec(&[cin, len], dx)?)?;
                }
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); cin * cout * k];
                    for ci in 0..cin {
                        for co in 0..cout {
                            for kk in 0..k {
                                let mut s = T::zero();
                                for i in 0..len {
                                    s += xv.data()[ci * len + i] * gd[co * lout + i * stride + kk];
                                }
                                dw[(ci * cout + co) * k + kk] = s;
                            }
                        }
                    }
                    self.acc(grads, *w, Tensor::from_vec(&[cin, cout, k], dw)?)?;
                }
                if let Some(b) = b {
                    self.bias_grad(g, *b, cout, grads)?;
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(g, *x, *w, *b, *stride, *pad, grads)?
            }
            Op::Upsample2x(a) => {
                let xs = self.shape(*a).to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dx[(ch * h + i / 2) * w + j / 2] += g.data()[(ch * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                self.acc(grads, *a, Tensor::from_vec(&xs, dx)?)?;
            }
            Op::ResizeLast(a) => {
                let xs = self.shape(*a).to_vec();
                let old = *xs.last().unwrap();
                let new = g.cols();
                let outer = g.len() / new.max(1);
                let keep = old.min(new);
                let mut dx = vec![T::zero(); outer * old];
                for r in 0..outer {
                    dx[r * old..r * old + keep].copy_from_slice(&g.data()[r * new..r * new + keep]);
                }
                self.acc(grads, *a, Tensor::from_vec(&xs, dx)?)?;
            }
            Op::Custom { x, grad } => {
                self.acc(grads, *x, grad.scale(g.data()[0]))?;
            }
        }
        Ok(())
    }

    fn bias_grad(&self, g: &Tensor<T>, b: Var, cout: usize, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        if !self.ng(b) {
            return Ok(());
        }
        let inner = g.len() / cout;
        let db: Vec<T> = (0..cout)
            .map(|c| g.data()[c * inner..(c + 1) * inner].iter().copied().sum())
            .collect();
        let s = self.shape(b).to_vec();
        self.acc(grads, b, Tensor::from_vec(&s, db)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, len) = (xv.shape()[0], xv.shape()[1]);
        let (cout, cig, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        let lout = g.cols();
        let cog = cout / groups;
        let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let mut dx = if need_x { vec![T::zero(); cin * len] } else { Vec::new() };
        let mut dw = if need_w { vec![T::zero(); cout * cig * k] } else { Vec::new() };
        for co in 0..cout {
            let grp = co / cog;
            let grow = &gd[co * lout..(co + 1) * lout];
            for ci in 0..cig {
                let xc = grp * cig + ci;
                for kk in 0..k {
                    let widx = (co * cig + ci) * k + kk;
                    let wval = wd[widx];
                    let mut acc = T::zero();
                    for (o, &gv) in grow.iter().enumerate() {
                        let idx = o * stride + kk;
                        if idx < pad || idx - pad >= len {
                            continue;
                        }
                        let xi = xc * len + idx - pad;
                        if need_x {
                            dx[xi] += wval * gv;
                        }
                        acc += gv * xd[xi];
                    }
                    if need_w {
                        dw[widx] += acc;
                    }
                }
            }
        }
        if need_x {
            self.acc(grads, x, Tensor::from_vec(&[cin, len], dx)?)?;
        }
        if need_w {
            self.acc(grads, w, Tensor::from_vec(&[cout, cig, k], dw)?)?;
        }
        if let Some(b) = b {
            self.bias_grad(g, b, cout, grads)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, h, wi) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        let (ho, wo) = (g.shape()[1], g.shape()[2]);
        let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let mut dx = if need_x { vec![T::zero(); cin * h * wi] } else { Vec::new() };
        let mut dw = if need_w { vec![T::zero(); wv.len()] } else { Vec::new() };
        for co in 0..cout {
            for ci in 0..cin {
                for a in 0..kh {
                    for c in 0..kw {
                        let widx = ((co * cin + ci) * kh + a) * kw + c;
                        let wval = wd[widx];
                        let mut acc = T::zero();
                        for oh in 0..ho {
                            let ih = oh * stride + a;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let xoff = (ci * h + ih - pad) * wi;
                            let goff = (co * ho + oh) * wo;
                            for ow in 0..wo {
                                let iw = ow * stride + c;
                                if iw < pad || iw - pad >= wi {
                                    continue;
                                }
                                let gv = gd[goff + ow];
                                if need_x {
                                    dx[xoff + iw - pad] += wval * gv;
                                }
                                acc += gv * xd[xoff + iw - pad];
                            }
                        }
                        if need_w {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        if need_x {
            self.acc(grads, x, Tensor::from_vec(&[cin, h, wi], dx)?)?;
        }
        if need_w {
            let s = wv.shape().to_vec();
            self.acc(grads, w, Tensor::from_vec(&s, dw)?)?;
        }
        if let Some(b) = b {
            self.bias_grad(g, b, cout, grads)?;
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let th = (k * (x + c * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::lit(3.0) * c * x * x)
}

#[cfg(test)]
mod tests;
