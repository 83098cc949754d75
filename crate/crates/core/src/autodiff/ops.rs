//! Differentiable operations on [`Tensor`].
//!
//! Broadcasting is limited to two patterns: a 0-d scalar against any tensor
//! (`add`, `sub`, `mul`, `div`) and a per-channel bias against an NCHW or NC
//! tensor (`add_bias`). Every other shape disagreement is an error.

use std::rc::Rc;

use super::graph::{Op, NO_SOURCE};
use super::kernels::{self, ConvGeom};
use super::tensor::{ensure_same_shape, Tensor};
use crate::error::{Error, Result};

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Tensor {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::record(op, &[self], self.shape.clone(), data)
    }

    fn binary(&self, other: &Tensor, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            if self.ndim() == 0 && other.ndim() > 0 {
                return self.expand(other.shape())?.binary(other, op, name, f);
            }
            if other.ndim() == 0 && self.ndim() > 0 {
                return self.binary(&other.expand(self.shape())?, op, name, f);
            }
            return Err(mismatch(name, self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::record(op, &[self, other], self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(Op::Neg, |v| -v)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::AddScalar(c), |v| v + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::MulScalar(c), |v| v * c)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Op::Exp, f64::exp)
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Result<Tensor> {
        self.unary(Op::Log, f64::ln)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    /// `(m, k) @ (k, n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(mismatch("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let data = kernels::matmul(&self.data, &other.data, m, k, n);
        Tensor::record(Op::Matmul, &[self, other], Rc::from([m, n]), data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::invalid("transpose", format!("expected 2-d, got {:?}", self.shape())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let idx: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(idx.into(), &[c, r])
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let total = self.data.iter().sum();
        Tensor::record(Op::Sum, &[self], Rc::from([]), vec![total])
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        self.sum()?.mul_scalar(1.0 / self.len() as f64)
    }

    /// Repeats a one-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.len() != 1 {
            return Err(mismatch("expand", self.shape(), shape));
        }
        let n = shape.iter().product();
        Tensor::record(Op::Expand, &[self], shape.into(), vec![self.data[0]; n])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Tensor::record(Op::Reshape, &[self], shape.into(), self.data.to_vec())
    }

    /// `out[i] = self[index[i]]`, or zero where `index[i] == NO_SOURCE`.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(mismatch("gather", shape, &[index.len()]));
        }
        let n = self.len();
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            data.push(match i {
                NO_SOURCE => 0.0,
                i if i < n => self.data[i],
                _ => return Err(Error::invalid("gather", format!("index {i} out of range for {n} elements"))),
            });
        }
        Tensor::record(Op::Gather(index), &[self], shape.into(), data)
    }

    /// Adjoint of [`Tensor::gather`]: `out[index[i]] += self[i]`.
    pub fn scatter_add(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if self.len() != index.len() {
            return Err(mismatch("scatter_add", self.shape(), &[index.len()]));
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for (&i, &v) in index.iter().zip(self.data.iter()) {
            match i {
                NO_SOURCE => {}
                i if i < n => data[i] += v,
                _ => return Err(Error::invalid("scatter_add", format!("index {i} out of range for {n} elements"))),
            }
        }
        Tensor::record(Op::ScatterAdd(index), &[self], shape.into(), data)
    }

    /// 2-D cross-correlation of an NCHW batch with an OIHW kernel.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if self.ndim() != 4 || weight.ndim() != 4 || self.shape[1] != weight.shape[1] {
            return Err(mismatch("conv2d", self.shape(), weight.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("stride", "must be positive"));
        }
        let geom = ConvGeom {
            batch: self.shape[0],
            c_in: self.shape[1],
            c_out: weight.shape[0],
            h: self.shape[2],
            w: self.shape[3],
            kh: weight.shape[2],
            kw: weight.shape[3],
            stride,
            pad,
        };
        if geom.h + 2 * pad < geom.kh || geom.w + 2 * pad < geom.kw {
            return Err(mismatch("conv2d", self.shape(), weight.shape()));
        }
        self.conv2d_geom(weight, geom)
    }

    pub(crate) fn conv2d_geom(&self, weight: &Tensor, geom: ConvGeom) -> Result<Tensor> {
        let x_shape = [geom.batch, geom.c_in, geom.h, geom.w];
        let w_shape = [geom.c_out, geom.c_in, geom.kh, geom.kw];
        if self.shape() != x_shape || weight.shape() != w_shape {
            return Err(mismatch("conv2d", self.shape(), weight.shape()));
        }
        let data = kernels::conv2d(&self.data, &weight.data, &geom);
        let shape = [geom.batch, geom.c_out, geom.out_h(), geom.out_w()];
        Tensor::record(Op::Conv2d(geom), &[self, weight], shape.into(), data)
    }

    /// `self` is the output gradient; result has the convolution input's shape.
    pub(crate) fn conv2d_grad_input(&self, weight: &Tensor, geom: ConvGeom) -> Result<Tensor> {
        let g_shape = [geom.batch, geom.c_out, geom.out_h(), geom.out_w()];
        let w_shape = [geom.c_out, geom.c_in, geom.kh, geom.kw];
        if self.shape() != g_shape || weight.shape() != w_shape {
            return Err(mismatch("conv2d_grad_input", self.shape(), weight.shape()));
        }
        let data = kernels::conv2d_grad_input(&self.data, &weight.data, &geom);
        let shape = [geom.batch, geom.c_in, geom.h, geom.w];
        Tensor::record(Op::Conv2dGradInput(geom), &[self, weight], shape.into(), data)
    }

    /// `self` is the convolution input; result has the kernel's shape.
    pub(crate) fn conv2d_grad_weight(&self, grad_out: &Tensor, geom: ConvGeom) -> Result<Tensor> {
        let x_shape = [geom.batch, geom.c_in, geom.h, geom.w];
        let g_shape = [geom.batch, geom.c_out, geom.out_h(), geom.out_w()];
        if self.shape() != x_shape || grad_out.shape() != g_shape {
            return Err(mismatch("conv2d_grad_weight", self.shape(), grad_out.shape()));
        }
        let data = kernels::conv2d_grad_weight(&self.data, &grad_out.data, &geom);
        let shape = [geom.c_out, geom.c_in, geom.kh, geom.kw];
        Tensor::record(Op::Conv2dGradWeight(geom), &[self, grad_out], shape.into(), data)
    }

    fn pool_dims(&self, op: &'static str, k: usize) -> Result<(usize, usize, usize)> {
        if self.ndim() != 4 || k == 0 || self.shape[2] < k || self.shape[3] < k {
            return Err(mismatch(op, self.shape(), &[k, k]));
        }
        Ok((self.shape[0] * self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Non-overlapping `k`x`k` average pooling.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        let (planes, h, w) = self.pool_dims("avg_pool2d", k)?;
        let data = kernels::avg_pool2d(&self.data, planes, h, w, k);
        let shape = [self.shape[0], self.shape[1], h / k, w / k];
        Tensor::record(Op::AvgPool(k), &[self], shape.into(), data)
    }

    pub(crate) fn avg_pool2d_adjoint(&self, k: usize, in_shape: &[usize]) -> Result<Tensor> {
        let expect = [in_shape[0], in_shape[1], in_shape[2] / k, in_shape[3] / k];
        if self.shape() != expect {
            return Err(mismatch("avg_pool2d_adjoint", self.shape(), in_shape));
        }
        let planes = in_shape[0] * in_shape[1];
        let data = kernels::avg_pool2d_adjoint(&self.data, planes, in_shape[2], in_shape[3], k);
        Tensor::record(Op::AvgPoolAdjoint(k), &[self], in_shape.into(), data)
    }

    /// Non-overlapping `k`x`k` max pooling; ties go to the first element in
    /// scan order.
    pub fn max_pool2d(&self, k: usize) -> Result<Tensor> {
        let (planes, h, w) = self.pool_dims("max_pool2d", k)?;
        let idx = kernels::max_pool2d_argmax(&self.data, planes, h, w, k);
        self.gather(idx.into(), &[self.shape[0], self.shape[1], h / k, w / k])
    }

    /// Repeats a `(C,)` vector along every axis of `shape` except axis 1.
    pub fn broadcast_channel(&self, shape: &[usize]) -> Result<Tensor> {
        if self.ndim() != 1 || shape.len() < 2 || shape[1] != self.shape[0] {
            return Err(mismatch("broadcast_channel", self.shape(), shape));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut data = vec![0.0; b * c * inner];
        for (chunk, &v) in data.chunks_mut(inner).zip(self.data.iter().cycle()) {
            chunk.fill(v);
        }
        Tensor::record(Op::BroadcastChannel, &[self], shape.into(), data)
    }

    /// Sums an `(N, C, ...)` tensor down to `(C,)`.
    pub fn reduce_channel(&self) -> Result<Tensor> {
        if self.ndim() < 2 {
            return Err(Error::invalid("reduce_channel", format!("expected ≥2-d, got {:?}", self.shape())));
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        let mut data = vec![0.0; c];
        for bi in 0..b {
            for (ci, acc) in data.iter_mut().enumerate() {
                *acc += self.data[(bi * c + ci) * inner..][..inner].iter().sum::<f64>();
            }
        }
        Tensor::record(Op::ReduceChannel, &[self], Rc::from([c]), data)
    }

    /// `self + bias` with `bias` of shape `(C,)` applied along axis 1.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        self.add(&bias.broadcast_channel(self.shape())?)
    }

    /// Concatenation along axis 0.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let mut rows = 0;
        for p in parts {
            if p.ndim() == 0 || p.shape[1..] != first.shape[1..] {
                return Err(mismatch("concat", first.shape(), p.shape()));
            }
            rows += p.shape[0];
        }
        let mut shape = first.shape.to_vec();
        shape[0] = rows;
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Tensor::record(Op::Concat, parts, shape.into(), data)
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let rows: Vec<usize> = (start..end).collect();
        self.select_rows(&rows)
    }

    /// Picks rows (axis-0 entries) in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.ndim() == 0 {
            return Err(Error::invalid("select_rows", "0-d tensor"));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut idx = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::invalid("select_rows", format!("row {r} out of range for {}", self.shape[0])));
            }
            idx.extend(r * inner..(r + 1) * inner);
        }
        let mut shape = self.shape.to_vec();
        shape[0] = rows.len();
        self.gather(idx.into(), &shape)
    }

    /// `(N, D) -> (N, 1)` row sums.
    pub fn row_sums(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::invalid("row_sums", format!("expected 2-d, got {:?}", self.shape())));
        }
        self.matmul(&Tensor::ones(&[self.shape[1], 1]))
    }

    /// `(N, 1) -> (N, n)` by repeating the single column.
    pub fn repeat_cols(&self, n: usize) -> Result<Tensor> {
        if self.ndim() != 2 || self.shape[1] != 1 {
            return Err(mismatch("repeat_cols", self.shape(), &[self.shape.first().copied().unwrap_or(0), 1]));
        }
        self.matmul(&Tensor::ones(&[1, n]))
    }

    /// Row-wise log-softmax of an `(N, C)` tensor.
    pub fn log_softmax(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::invalid("log_softmax", format!("expected 2-d, got {:?}", self.shape())));
        }
        let (n, c) = (self.shape[0], self.shape[1]);
        // Constant per-row shift for stability; log-softmax is shift invariant,
        // so treating it as a constant leaves every derivative unchanged.
        let max: Vec<f64> = self
            .data
            .chunks(c)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shift = Tensor::new(&[n, 1], max)?.repeat_cols(c)?;
        let shifted = self.sub(&shift)?;
        let lse = shifted.exp()?.row_sums()?.ln()?;
        shifted.sub(&lse.repeat_cols(c)?)
    }

    pub fn softmax(&self) -> Result<Tensor> {
        self.log_softmax()?.exp()
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&self) -> Result<Tensor> {
        self.mul(self)?.sum()?.sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        ensure_same_shape("dot", self, other)?;
        self.mul(other)?.sum()
    }

    /// Cosine similarity between two same-shape tensors viewed as vectors.
    pub fn cosine_similarity(&self, other: &Tensor) -> Result<Tensor> {
        let denom = self.l2_norm()?.mul(&other.l2_norm()?)?;
        self.dot(other)?.div(&denom)
    }

    /// Divides each row of an `(N, D)` tensor by its L2 norm. All-zero rows
    /// stay zero.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::invalid("normalize_rows", format!("expected 2-d, got {:?}", self.shape())));
        }
        let sq = self.mul(self)?.row_sums()?;
        let norms = sq.add(&sq.zero_mask())?.sqrt()?;
        self.div(&norms.repeat_cols(self.shape[1])?)
    }

    /// Detached tensor holding 1 where `self` is exactly zero, else 0.
    pub fn zero_mask(&self) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&v| if v == 0.0 { 1.0 } else { 0.0 }).collect();
        Tensor::from_parts(self.shape.clone(), data.into())
    }
}
