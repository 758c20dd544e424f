//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its forward value and whatever
//! context its backward rule needs. Nodes are only ever appended, so the tape
//! is topologically ordered by construction and backward is a single reverse
//! sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `x` laid out as `(outer, C, inner)` plus a per-channel bias `[C]`.
    AddChannel {
        x: usize,
        bias: usize,
        inner: usize,
    },
    MulChannel {
        x: usize,
        scale: usize,
        inner: usize,
    },
    Scale(usize, T),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    ConvT2d {
        x: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        inner: usize,
        inv_std: Vec<T>,
    },
    LeakyRelu(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Log(usize),
    LogClamp(usize, T),
    Sum(usize),
    Mean(usize),
    MeanRows {
        x: usize,
        rows: usize,
        cols: usize,
    },
    SumLastAxis {
        x: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Reshape(usize),
    SliceRows {
        x: usize,
        start: usize,
    },
    MaskMul(usize, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered log of primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Move the gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[usize]) -> bool {
        vs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Register a differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Register a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x.0]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    fn channel_layout(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        let cs = self.shape(c);
        let ch = numel(cs);
        let (axis, inner) = match xs.len() {
            2 => (1, 1),
            4 => (1, xs[2] * xs[3]),
            _ => return Err(Error::shape(op, xs, cs)),
        };
        if cs.len() != 1 || xs[axis] != ch {
            return Err(Error::shape(op, xs, cs));
        }
        Ok((xs[0], ch, inner))
    }

    /// Add a per-channel bias: last axis of a matrix, axis 1 of an NCHW batch.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, ch, inner) = self.channel_layout("add_channel", x, bias)?;
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, run) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let c = b[i % ch];
            run.iter_mut().for_each(|v| *v += c);
        }
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(
            out,
            Op::AddChannel {
                x: x.0,
                bias: bias.0,
                inner,
            },
            rg,
        ))
    }

    /// Multiply by a per-channel scale.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (_, ch, inner) = self.channel_layout("mul_channel", x, scale)?;
        let s = self.value(scale).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, run) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let c = s[i % ch];
            run.iter_mut().for_each(|v| *v *= c);
        }
        let rg = self.rg(&[x.0, scale.0]);
        Ok(self.push(
            out,
            Op::MulChannel {
                x: x.0,
                scale: scale.0,
                inner,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x.0, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x.0), |v| v + c)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// 2-D correlation of an NCHW batch with an `O×C×Kh×Kw` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let geom = ConvGeom::conv(&xs, self.shape(kernel), stride, padding)?;
        let n = xs[0];
        let out =
            kernels::conv2d_forward(self.value(x).data(), self.value(kernel).data(), n, &geom);
        let rg = self.rg(&[x.0, kernel.0]);
        Ok(self.push(
            Tensor::new(vec![n, geom.c_out, geom.out_h, geom.out_w], out)?,
            Op::Conv2d {
                x: x.0,
                kernel: kernel.0,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution with a `Cin×Cout×K×K` kernel; `Same` padding
    /// multiplies spatial extents by `stride`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] || ks[2] != ks[3] {
            return Err(Error::shape("conv_transpose2d", &xs, &ks));
        }
        let geom = ConvGeom::transposed(xs[1], xs[2], xs[3], ks[1], ks[2], stride, padding)?;
        let n = xs[0];
        let out =
            kernels::conv2d_grad_input(self.value(x).data(), self.value(kernel).data(), n, &geom);
        let rg = self.rg(&[x.0, kernel.0]);
        Ok(self.push(
            Tensor::new(vec![n, geom.c_in, geom.h, geom.w], out)?,
            Op::ConvT2d {
                x: x.0,
                kernel: kernel.0,
                geom,
            },
            rg,
        ))
    }

    /// Normalize each channel to zero mean and unit (biased) variance over the
    /// batch. Returns the output and the batch mean and variance.
    pub fn batch_norm(&mut self, x: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xs = self.shape(x).to_vec();
        let (outer, ch, inner) = match xs.len() {
            2 => (xs[0], xs[1], 1),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => return Err(Error::shape("batch_norm", &xs, &[])),
        };
        let count = T::lit((outer * inner) as f64);
        let data = self.value(x).data();
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for &v in &data[base..base + inner] {
                    mean[c] += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for &v in &data[base..base + inner] {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / inner) % ch;
            *v = (*v - mean[c]) * inv_std[c];
        }
        let rg = self.rg(&[x.0]);
        let var_out = self.push(
            out,
            Op::BatchNorm {
                x: x.0,
                inner,
                inv_std,
            },
            rg,
        );
        Ok((var_out, mean, var))
    }

    /// Leaky rectifier; the gradient at exactly zero takes the negative-side
    /// slope.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x.0, slope), |v| {
            if v > T::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x.0), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x.0), |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {xs:?}"
            )));
        }
        let outer = numel(&xs[..axis]);
        let len = xs[axis];
        let inner = numel(&xs[axis + 1..]);
        let out = softmax_values(self.value(x), outer, len, inner);
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            out,
            Op::Softmax {
                x: x.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x.0), |v| v.ln())
    }

    /// `ln(max(x, floor))`; no gradient where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: T) -> Var {
        self.unary(x, Op::LogClamp(x.0, floor), |v| v.max(floor).ln())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::lit(t.len() as f64);
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    /// Column means of a matrix, giving a vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("mean_rows", &xs, &[]));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(&d[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        let inv = T::one() / T::lit(rows as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![cols], out)?,
            Op::MeanRows { x: x.0, rows, cols },
            rg,
        ))
    }

    /// Row sums of a matrix, giving a vector.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("sum_last_axis", &xs, &[]));
        }
        let cols = xs[1];
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(cols)
            .map(|r| r.iter().copied().sum())
            .collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![xs[0]], out)?,
            Op::SumLastAxis { x: x.0, cols },
            rg,
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let fs = self.shape(*first).to_vec();
        if axis >= fs.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range"
            )));
        }
        let outer = numel(&fs[..axis]);
        let inner = numel(&fs[axis + 1..]);
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != fs.len() || s[..axis] != fs[..axis] || s[axis + 1..] != fs[axis + 1..] {
                return Err(Error::shape("concat", &fs, s));
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = fs.clone();
        shape[axis] = total;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: idx,
                outer,
                widths,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Reshape(x.0), rg))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::SliceRows { x: x.0, start }, rg))
    }

    /// Multiply elementwise by a fixed mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("mask_mul", self.shape(x), &[mask.len()]));
        }
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::MaskMul(x.0, mask), rg))
    }

    /// Order-sensitive checksum over every recorded value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for n in &self.nodes {
            for v in n.value.data() {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Reverse sweep from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..count).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn val(&self, i: usize) -> &[T] {
        self.nodes[i].value.data()
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let y = self.val(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*b) {
                    add_into(&mut grads[*b], g.clone());
                }
                if self.wants(*a) {
                    add_into(&mut grads[*a], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    add_into(&mut grads[*b], g.iter().map(|&v| -v).collect());
                }
                if self.wants(*a) {
                    add_into(&mut grads[*a], g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let c = g.iter().zip(self.val(*b)).map(|(&g, &v)| g * v).collect();
                    add_into(&mut grads[*a], c);
                }
                if self.wants(*b) {
                    let c = g.iter().zip(self.val(*a)).map(|(&g, &v)| g * v).collect();
                    add_into(&mut grads[*b], c);
                }
            }
            Op::AddChannel { x, bias, inner } => {
                if self.wants(*bias) {
                    let ch = self.val(*bias).len();
                    let mut gb = vec![T::zero(); ch];
                    for (i, run) in g.chunks(*inner.max(&1)).enumerate() {
                        let acc = &mut gb[i % ch];
                        for &v in run {
                            *acc += v;
                        }
                    }
                    add_into(&mut grads[*bias], gb);
                }
                if self.wants(*x) {
                    add_into(&mut grads[*x], g);
                }
            }
            Op::MulChannel { x, scale, inner } => {
                let s = self.val(*scale);
                let ch = s.len();
                if self.wants(*scale) {
                    let mut gs = vec![T::zero(); ch];
                    for (j, (&gv, &xv)) in g.iter().zip(self.val(*x)).enumerate() {
                        gs[(j / inner) % ch] += gv * xv;
                    }
                    add_into(&mut grads[*scale], gs);
                }
                if self.wants(*x) {
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * s[(j / inner) % ch])
                        .collect();
                    add_into(&mut grads[*x], gx);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                add_into(&mut grads[*x], g.iter().map(|&v| v * c).collect());
            }
            Op::AddScalar(x) => add_into(&mut grads[*x], g),
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    add_into(
                        &mut grads[*a],
                        kernels::matmul_nt(&g, self.val(*b), *m, *n, *k),
                    );
                }
                if self.wants(*b) {
                    add_into(
                        &mut grads[*b],
                        kernels::matmul_tn(self.val(*a), &g, *m, *k, *n),
                    );
                }
            }
            Op::Conv2d { x, kernel, geom } => {
                let n = self.nodes[*x].value.shape()[0];
                if self.wants(*x) {
                    add_into(
                        &mut grads[*x],
                        kernels::conv2d_grad_input(&g, self.val(*kernel), n, geom),
                    );
                }
                if self.wants(*kernel) {
                    add_into(
                        &mut grads[*kernel],
                        kernels::conv2d_grad_kernel(&g, self.val(*x), n, geom),
                    );
                }
            }
            Op::ConvT2d { x, kernel, geom } => {
                let n = self.nodes[*x].value.shape()[0];
                if self.wants(*x) {
                    add_into(
                        &mut grads[*x],
                        kernels::conv2d_forward(&g, self.val(*kernel), n, geom),
                    );
                }
                if self.wants(*kernel) {
                    add_into(
                        &mut grads[*kernel],
                        kernels::conv2d_grad_kernel(self.val(*x), &g, n, geom),
                    );
                }
            }
            Op::BatchNorm { x, inner, inv_std } => {
                let ch = inv_std.len();
                let count = g.len() / ch;
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gy = vec![T::zero(); ch];
                for (j, (&gv, &yv)) in g.iter().zip(y).enumerate() {
                    let c = (j / inner) % ch;
                    sum_g[c] += gv;
                    sum_gy[c] += gv * yv;
                }
                let m = T::lit(count as f64);
                let gx = g
                    .iter()
                    .zip(y)
                    .enumerate()
                    .map(|(j, (&gv, &yv))| {
                        let c = (j / inner) % ch;
                        inv_std[c] * (gv - sum_g[c] / m - yv * sum_gy[c] / m)
                    })
                    .collect();
                add_into(&mut grads[*x], gx);
            }
            Op::LeakyRelu(x, slope) => {
                let gx = g
                    .iter()
                    .zip(self.val(*x))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * *slope })
                    .collect();
                add_into(&mut grads[*x], gx);
            }
            Op::Tanh(x) => {
                let gx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                    .collect();
                add_into(&mut grads[*x], gx);
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                add_into(&mut grads[*x], gx);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..*outer {
                    for s in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + s;
                        let dot: T = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                add_into(&mut grads[*x], gx);
            }
            Op::Log(x) => {
                let gx = g
                    .iter()
                    .zip(self.val(*x))
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                add_into(&mut grads[*x], gx);
            }
            Op::LogClamp(x, floor) => {
                let gx = g
                    .iter()
                    .zip(self.val(*x))
                    .map(|(&gv, &xv)| if xv >= *floor { gv / xv } else { T::zero() })
                    .collect();
                add_into(&mut grads[*x], gx);
            }
            Op::Sum(x) => {
                let n = self.val(*x).len();
                add_into(&mut grads[*x], vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.val(*x).len();
                add_into(&mut grads[*x], vec![g[0] / T::lit(n as f64); n]);
            }
            Op::MeanRows { x, rows, cols } => {
                let inv = T::one() / T::lit(*rows as f64);
                let mut gx = Vec::with_capacity(rows * cols);
                for _ in 0..*rows {
                    gx.extend(g.iter().map(|&v| v * inv));
                }
                add_into(&mut grads[*x], gx);
            }
            Op::SumLastAxis { x, cols } => {
                let gx = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, *cols))
                    .collect();
                add_into(&mut grads[*x], gx);
            }
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let row: usize = widths.iter().sum();
                let mut off = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..*outer {
                            gp.extend_from_slice(&g[o * row + off..o * row + off + w]);
                        }
                        add_into(&mut grads[*p], gp);
                    }
                    off += w;
                }
            }
            Op::Reshape(x) => add_into(&mut grads[*x], g),
            Op::SliceRows { x, start } => {
                let src = &self.nodes[*x].value;
                let stride = src.len() / src.shape()[0];
                let mut gx = vec![T::zero(); src.len()];
                gx[start * stride..start * stride + g.len()].copy_from_slice(&g);
                add_into(&mut grads[*x], gx);
            }
            Op::MaskMul(x, mask) => {
                let gx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                add_into(&mut grads[*x], gx);
            }
        }
    }
}

fn softmax_values<T: Scalar>(x: &Tensor<T>, outer: usize, len: usize, inner: usize) -> Tensor<T> {
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for s in 0..inner {
            let at = |j: usize| (o * len + j) * inner + s;
            let mx = (0..len).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..len {
                let e = (d[at(j)] - mx).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] /= z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Softmax along `axis` without recording anything.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if axis >= xs.len() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for shape {xs:?}"
        )));
    }
    Ok(softmax_values(
        x,
        numel(&xs[..axis]),
        xs[axis],
        numel(&xs[axis + 1..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn leaky_relu_kink_uses_negative_slope() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(vec![3], &[-1.0, 0.0, 1.0]).unwrap());
        let y = tape.leaky_relu(x, 0.2);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.2, 0.2, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(
            &Tensor::<f64>::from_f64(vec![3], &[0.0, 0.0, 0.0]).unwrap(),
            0,
        )
        .unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(
            &Tensor::<f64>::from_f64(vec![2], &[1000.0, 0.0]).unwrap(),
            0,
        )
        .unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let l = [1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()];
        let s = softmax(&Tensor::<f64>::from_f64(vec![3], &l).unwrap(), 0).unwrap();
        for (v, e) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::<f64>::from_f64(vec![2, 2], &[0.0, 1.0, 0.0, 3.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.at2(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.at2(0, 1) + s.at2(1, 1) - 1.0).abs() < 1e-15);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let d = tape.detach(w);
        let p = tape.mul(w, d).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[1.0, 2.0]);
    }
}
