use super::kernels::{self, BatchStats, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    /// `max{0, x}`. Same values as `Relu`; kept distinct so penalty terms read as written.
    Max0,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Normalize by the statistics of the presented batch.
    Train,
    /// Normalize by stored running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary { op: UnaryOp, input: Var },
    Binary { op: BinaryOp, lhs: Var, rhs: Var },
    Scale { input: Var, factor: f64 },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, batch: usize },
    AddAlong { input: Var, bias: Var, len: usize, inner: usize },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        plane: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Softmax { input: Var },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    Reduce { input: Var, targets: Vec<usize>, factor: f64 },
    Linear { input: Var, weight: Var, rows: usize, k: usize, m: usize },
    Reshape { input: Var },
    Concat { inputs: Vec<Var>, outer: usize, blocks: Vec<usize> },
    Narrow { input: Var, outer: usize, in_block: usize, offset: usize, block: usize },
    Repeat { input: Var, outer: usize, inner: usize, times: usize },
    WeightedSum { weights: Var, input: Var, inner: usize },
    Indicator { input: Var, threshold: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of executed operations.
///
/// Node ids increase with execution order, so every node sits after its inputs
/// and the reverse pass is a plain descending walk.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input: no gradient is tracked for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that accumulates gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a gradient-tracking leaf, once any backward pass ran.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Relu | UnaryOp::Max0 => |x| x.max(0.0),
            UnaryOp::Abs => f64::abs,
            UnaryOp::Neg => |x| -x,
        };
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, Op::Unary { op, input: a }, needs)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("elementwise", va.shape(), vb.shape()));
        }
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary { op, lhs: a, rhs: b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn max0(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Max0, a)
    }

    /// `factor * a` for a constant factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| factor * x);
        let needs = self.needs(a);
        self.push(value, Op::Scale { input: a, factor }, needs)
    }

    /// Elementwise `1[x > threshold]`. Carries no gradient.
    pub fn indicator_gt(&mut self, a: Var, threshold: f64) -> Var {
        let value = self.value(a).map(|x| if x > threshold { 1.0 } else { 0.0 });
        self.push(value, Op::Indicator { input: a, threshold }, false)
    }

    // ---- convolution and normalization -------------------------------------

    /// Cross-correlation of `[C_in,H,W]` (or `[N,C_in,H,W]`) with `[C_out,C_in,k,k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 {
            return Err(Error::dim("conv2d", None, format!("kernel must be 4-d, got {ks:?}")));
        }
        if ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(Error::dim("conv2d", Some(2), format!("kernel must be square and odd, got {ks:?}")));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be at least 1".into()));
        }
        let (batch, off) = match xs.len() {
            3 => (1, 0),
            4 => (xs[0], 1),
            _ => return Err(Error::dim("conv2d", None, format!("input must be 3-d or 4-d, got {xs:?}"))),
        };
        if xs[off] != ks[1] {
            return Err(Error::dim(
                "conv2d",
                Some(off),
                format!("input has {} channels, kernel expects {}", xs[off], ks[1]),
            ));
        }
        let (h, w, k) = (xs[off + 1], xs[off + 2], ks[2]);
        let oh = kernels::conv_output_extent(h, k, stride, padding)
            .ok_or_else(|| Error::dim("conv2d", Some(off + 1), format!("height {h} too small for kernel {k}")))?;
        let ow = kernels::conv_output_extent(w, k, stride, padding)
            .ok_or_else(|| Error::dim("conv2d", Some(off + 2), format!("width {w} too small for kernel {k}")))?;
        let geom = ConvGeom {
            c_in: ks[1],
            h,
            w,
            c_out: ks[0],
            k,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let data = kernels::conv2d_forward(&geom, batch, self.value(input).data(), self.value(kernel).data());
        let mut shape = xs[..off].to_vec();
        shape.extend([ks[0], oh, ow]);
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
            },
            needs,
        ))
    }

    /// Adds `bias[j]` to every element whose index along `axis` is `j`.
    pub fn add_along(&mut self, input: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let bs = self.shape(bias);
        if axis >= xs.len() {
            return Err(Error::dim("add_along", Some(axis), format!("axis out of range for {xs:?}")));
        }
        if bs.len() != 1 || bs[0] != xs[axis] {
            return Err(Error::dim(
                "add_along",
                Some(axis),
                format!("bias {bs:?} does not match extent {}", xs[axis]),
            ));
        }
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let b = self.value(bias).data();
        let mut data = self.value(input).data().to_vec();
        for (chunk_idx, chunk) in data.chunks_mut(inner).enumerate() {
            let bj = b[chunk_idx % len];
            chunk.iter_mut().for_each(|x| *x += bj);
        }
        let value = Tensor::new(xs, data)?;
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(value, Op::AddAlong { input, bias, len, inner }, needs))
    }

    /// Batch normalization of `[C,H,W]` or `[N,C,H,W]` with per-channel affine `gamma`, `beta`.
    /// In training mode also returns the batch statistics for updating running averages.
    pub fn batchnorm2d(&mut self, input: Var, gamma: Var, beta: Var, mode: NormMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(input).to_vec();
        let (batch, off) = match xs.len() {
            3 => (1, 0),
            4 => (xs[0], 1),
            _ => return Err(Error::dim("batchnorm2d", None, format!("input must be 3-d or 4-d, got {xs:?}"))),
        };
        let channels = xs[off];
        let plane = xs[off + 1] * xs[off + 2];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [channels] {
                return Err(Error::dim(
                    "batchnorm2d",
                    Some(off),
                    format!("{name} {:?} does not match {channels} channels", self.shape(v)),
                ));
            }
        }
        let running = match mode {
            NormMode::Train => None,
            NormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != channels || running_var.len() != channels {
                    return Err(Error::dim("batchnorm2d", Some(off), "running statistics length mismatch"));
                }
                Some((running_mean, running_var))
            }
        };
        let fwd = kernels::batchnorm_forward(
            self.value(input).data(),
            batch,
            channels,
            plane,
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
        );
        let value = Tensor::new(xs, fwd.out)?;
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                channels,
                plane,
                normalized: fwd.normalized,
                inv_std: fwd.inv_std,
                train: running.is_none(),
            },
            needs,
        );
        Ok((v, fwd.stats))
    }

    // ---- softmax and losses ------------------------------------------------

    /// Softmax of a vector, computed after subtracting the maximum.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 1 {
            return Err(Error::dim("softmax", None, format!("expected a vector, got {:?}", x.shape())));
        }
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let value = Tensor::vector(softmax_values(x.data()));
        let needs = self.needs(input);
        Ok(self.push(value, Op::Softmax { input }, needs))
    }

    /// `-log softmax(logits)[label]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.value(logits);
        if x.ndim() != 1 {
            return Err(Error::dim("cross_entropy", None, format!("expected a vector, got {:?}", x.shape())));
        }
        if label >= x.len() {
            return Err(Error::Usage(format!("label {label} out of range for {} classes", x.len())));
        }
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("logits contain NaN".into()));
        }
        let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let loss = (max - x.data()[label]) + x.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs = softmax_values(x.data());
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }, needs))
    }

    // ---- reductions and linear maps ----------------------------------------

    /// Sum or mean over `axes`, which are removed from the result shape.
    pub fn reduce(&mut self, op: ReduceOp, input: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let mut reduced = vec![false; xs.len()];
        for &a in axes {
            if a >= xs.len() || reduced[a] {
                return Err(Error::dim("reduce", Some(a), format!("invalid or repeated axis for shape {xs:?}")));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = xs.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let count: usize = xs.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&d, _)| d).product();
        let factor = match op {
            ReduceOp::Sum => 1.0,
            ReduceOp::Mean => 1.0 / count as f64,
        };
        let targets = reduction_targets(&xs, &reduced);
        let mut data = vec![0.0; out_shape.iter().product()];
        for (x, &t) in self.value(input).data().iter().zip(&targets) {
            data[t] += x;
        }
        if factor != 1.0 {
            data.iter_mut().for_each(|v| *v *= factor);
        }
        let value = Tensor::new(out_shape, data)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Reduce { input, targets, factor }, needs))
    }

    pub fn sum(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Sum, input, axes)
    }

    pub fn mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Mean, input, axes)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.reduce(ReduceOp::Sum, input, &axes).expect("all axes are valid")
    }

    /// `x W^T` for `x` of shape `[k]` or `[rows,k]` and `W` of shape `[m,k]`.
    pub fn linear(&mut self, input: Var, weight: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 {
            return Err(Error::dim("linear", None, format!("weight must be 2-d, got {ws:?}")));
        }
        let (rows, k) = match xs.len() {
            1 => (1, xs[0]),
            2 => (xs[0], xs[1]),
            _ => return Err(Error::dim("linear", None, format!("input must be 1-d or 2-d, got {xs:?}"))),
        };
        if k != ws[1] {
            return Err(Error::dim(
                "linear",
                Some(xs.len() - 1),
                format!("input width {k} does not match weight {ws:?}"),
            ));
        }
        let m = ws[0];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut data = vec![0.0; rows * m];
        for r in 0..rows {
            let xr = &x[r * k..(r + 1) * k];
            for j in 0..m {
                data[r * m + j] = xr.iter().zip(&w[j * k..(j + 1) * k]).map(|(a, b)| a * b).sum();
            }
        }
        let shape = if xs.len() == 1 { vec![m] } else { vec![rows, m] };
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(input) || self.needs(weight);
        Ok(self.push(value, Op::Linear { input, weight, rows, k, m }, needs))
    }

    /// `sum_i w[i] * x[i, ...]` for `w` of shape `[n]` and `x` of shape `[n, ...]`.
    pub fn weighted_sum(&mut self, weights: Var, input: Var) -> Result<Var> {
        let ws = self.shape(weights).to_vec();
        let xs = self.shape(input).to_vec();
        if ws.len() != 1 || xs.len() < 2 || xs[0] != ws[0] {
            return Err(Error::dim(
                "weighted_sum",
                Some(0),
                format!("weights {ws:?} do not match leading axis of {xs:?}"),
            ));
        }
        let inner: usize = xs[1..].iter().product();
        let w = self.value(weights).data();
        let x = self.value(input).data();
        let mut data = vec![0.0; inner];
        for (wi, xi) in w.iter().zip(x.chunks(inner)) {
            data.iter_mut().zip(xi).for_each(|(o, v)| *o += wi * v);
        }
        let value = Tensor::new(xs[1..].to_vec(), data)?;
        let needs = self.needs(weights) || self.needs(input);
        Ok(self.push(value, Op::WeightedSum { weights, input, inner }, needs))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Reshape { input }, needs))
    }

    /// Joins equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Usage("stack needs at least one input".into()))?;
        let inner = self.shape(*first).to_vec();
        for v in inputs {
            if self.shape(*v) != inner.as_slice() {
                return Err(mismatch("stack", &inner, self.shape(*v)));
            }
        }
        let mut shape = vec![inputs.len()];
        shape.extend(&inner);
        self.concat_raw(inputs, 1, shape)
    }

    /// Joins tensors along an existing axis; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Usage("concat needs at least one input".into()))?;
        let mut shape = self.shape(*first).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("concat", Some(axis), "axis out of range"));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != shape.len() || s.iter().zip(&shape).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", &shape, s));
            }
            total += s[axis];
        }
        shape[axis] = total;
        let outer: usize = shape[..axis].iter().product();
        self.concat_raw(inputs, outer, shape)
    }

    fn concat_raw(&mut self, inputs: &[Var], outer: usize, shape: Vec<usize>) -> Result<Var> {
        let blocks: Vec<usize> = inputs.iter().map(|v| self.value(*v).len() / outer).collect();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (v, &b) in inputs.iter().zip(&blocks) {
                data.extend_from_slice(&self.value(*v).data()[o * b..(o + 1) * b]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let needs = inputs.iter().any(|v| self.needs(*v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                blocks,
            },
            needs,
        ))
    }

    /// Indices `start..start+len` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() {
            return Err(Error::dim("narrow", Some(axis), "axis out of range"));
        }
        if len == 0 || start + len > xs[axis] {
            return Err(Error::dim(
                "narrow",
                Some(axis),
                format!("range {start}..{} outside extent {}", start + len, xs[axis]),
            ));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let (in_block, offset, block) = (xs[axis] * inner, start * inner, len * inner);
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(outer * block);
        for o in 0..outer {
            data.extend_from_slice(&x[o * in_block + offset..o * in_block + offset + block]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::Narrow {
                input,
                outer,
                in_block,
                offset,
                block,
            },
            needs,
        ))
    }

    /// Replicates an extent-1 `axis` `times` times.
    pub fn repeat(&mut self, input: Var, axis: usize, times: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() || xs[axis] != 1 {
            return Err(Error::dim("repeat", Some(axis), format!("axis must exist with extent 1 in {xs:?}")));
        }
        if times == 0 {
            return Err(Error::Usage("repeat count must be positive".into()));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            for _ in 0..times {
                data.extend_from_slice(&x[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = xs;
        shape[axis] = times;
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::Repeat {
                input,
                outer,
                inner,
                times,
            },
            needs,
        ))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Which side of each non-smooth point the recorded inputs sit on, in tape order.
    ///
    /// Two evaluations with equal patterns lie on the same smooth piece, so finite
    /// differences between them are meaningful.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Unary {
                    op: UnaryOp::Relu | UnaryOp::Max0,
                    input,
                } => bits.extend(self.value(input).data().iter().map(|&x| x > 0.0)),
                Op::Unary { op: UnaryOp::Abs, input } => {
                    bits.extend(self.value(input).data().iter().flat_map(|&x| [x > 0.0, x < 0.0]))
                }
                Op::Indicator { input, threshold } => {
                    bits.extend(self.value(input).data().iter().map(|&x| x > threshold))
                }
                _ => {}
            }
        }
        bits
    }

    /// Propagates d(root)/d(leaf) into every gradient-tracking leaf, adding to
    /// what earlier passes left there.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if self.value(root).len() != 1 || rs.iter().any(|&d| d != 1) {
            return Err(Error::Usage(format!("backward needs a scalar root, got shape {rs:?}")));
        }
        let Tape { nodes, grads } = self;
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.needs_grad && g.is_none() {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if nodes[root.0].needs_grad {
            adj[root.0] = Some(vec![1.0]);
        }
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            propagate(nodes, &mut adj, node, &g, grads[id].as_mut());
        }
        Ok(())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    let axis = if a.len() == b.len() {
        a.iter().zip(b).position(|(x, y)| x != y)
    } else {
        None
    };
    Error::dim(op, axis, format!("shapes {a:?} and {b:?} differ"))
}

pub(crate) fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn reduction_targets(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut targets = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let t = idx
            .iter()
            .zip(shape)
            .zip(reduced)
            .filter(|(_, &r)| !r)
            .fold(0, |acc, ((&i, &d), _)| acc * d + i);
        targets.push(t);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    targets
}

/// Adjoint buffer for `v`, created on first use; `None` when `v` carries no gradient.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

fn propagate(nodes: &[Node], adj: &mut [Option<Vec<f64>>], node: &Node, g: &[f64], leaf_grad: Option<&mut Vec<f64>>) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {
            if let Some(acc) = leaf_grad {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Indicator { .. } => {}
        Op::Unary { op, input } => {
            let x = val(*input);
            let y = node.value.data();
            if let Some(dx) = slot(nodes, adj, *input) {
                for i in 0..g.len() {
                    let d = match op {
                        UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                        UnaryOp::Tanh => 1.0 - y[i] * y[i],
                        UnaryOp::Relu | UnaryOp::Max0 => (x[i] > 0.0) as u8 as f64,
                        UnaryOp::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Neg => -1.0,
                    };
                    dx[i] += d * g[i];
                }
            }
        }
        Op::Binary { op, lhs, rhs } => {
            let (a, b) = (*lhs, *rhs);
            match op {
                BinaryOp::Add | BinaryOp::Sub => {
                    if let Some(da) = slot(nodes, adj, a) {
                        da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                    }
                    let sign = if *op == BinaryOp::Add { 1.0 } else { -1.0 };
                    if let Some(db) = slot(nodes, adj, b) {
                        db.iter_mut().zip(g).for_each(|(d, gi)| *d += sign * gi);
                    }
                }
                BinaryOp::Mul => {
                    if nodes[a.0].needs_grad {
                        let vb = val(b).to_vec();
                        let da = slot(nodes, adj, a).unwrap();
                        for i in 0..g.len() {
                            da[i] += g[i] * vb[i];
                        }
                    }
                    if nodes[b.0].needs_grad {
                        let va = val(a).to_vec();
                        let db = slot(nodes, adj, b).unwrap();
                        for i in 0..g.len() {
                            db[i] += g[i] * va[i];
                        }
                    }
                }
            }
        }
        Op::Scale { input, factor } => {
            if let Some(dx) = slot(nodes, adj, *input) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += factor * gi);
            }
        }
        Op::Conv2d {
            input,
            kernel,
            geom,
            batch,
        } => {
            if nodes[input.0].needs_grad {
                let k = val(*kernel);
                let dx = slot(nodes, adj, *input).unwrap();
                kernels::conv2d_backward_input(geom, *batch, g, k, dx);
            }
            if nodes[kernel.0].needs_grad {
                let x = val(*input);
                let dk = slot(nodes, adj, *kernel).unwrap();
                kernels::conv2d_backward_kernel(geom, *batch, g, x, dk);
            }
        }
        Op::AddAlong { input, bias, len, inner } => {
            if let Some(dx) = slot(nodes, adj, *input) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
            if let Some(db) = slot(nodes, adj, *bias) {
                for (chunk_idx, chunk) in g.chunks(*inner).enumerate() {
                    db[chunk_idx % len] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            channels,
            plane,
            normalized,
            inv_std,
            train,
        } => {
            let (c_n, p) = (*channels, *plane);
            let batch = g.len() / (c_n * p);
            let mut sum_g = vec![0.0; c_n];
            let mut sum_gx = vec![0.0; c_n];
            for b in 0..batch {
                for c in 0..c_n {
                    let base = (b * c_n + c) * p;
                    for i in base..base + p {
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * normalized[i];
                    }
                }
            }
            if let Some(dg) = slot(nodes, adj, *gamma) {
                dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
            }
            if let Some(db) = slot(nodes, adj, *beta) {
                db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
            }
            if nodes[input.0].needs_grad {
                let gam = val(*gamma).to_vec();
                let m = (batch * p) as f64;
                let dx = slot(nodes, adj, *input).unwrap();
                for b in 0..batch {
                    for c in 0..c_n {
                        let base = (b * c_n + c) * p;
                        let scale = gam[c] * inv_std[c];
                        for i in base..base + p {
                            dx[i] += if *train {
                                scale * (g[i] - sum_g[c] / m - normalized[i] * sum_gx[c] / m)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
            }
        }
        Op::Softmax { input } => {
            if let Some(dx) = slot(nodes, adj, *input) {
                let y = node.value.data();
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                for i in 0..y.len() {
                    dx[i] += y[i] * (g[i] - dot);
                }
            }
        }
        Op::CrossEntropy { logits, label, probs } => {
            if let Some(dx) = slot(nodes, adj, *logits) {
                for (i, p) in probs.iter().enumerate() {
                    let onehot = if i == *label { 1.0 } else { 0.0 };
                    dx[i] += g[0] * (p - onehot);
                }
            }
        }
        Op::Reduce { input, targets, factor } => {
            if let Some(dx) = slot(nodes, adj, *input) {
                for (d, &t) in dx.iter_mut().zip(targets) {
                    *d += factor * g[t];
                }
            }
        }
        Op::Linear {
            input,
            weight,
            rows,
            k,
            m,
        } => {
            let (rows, k, m) = (*rows, *k, *m);
            if nodes[input.0].needs_grad {
                let w = val(*weight);
                let dx = slot(nodes, adj, *input).unwrap();
                for r in 0..rows {
                    for j in 0..m {
                        let gj = g[r * m + j];
                        let wj = &w[j * k..(j + 1) * k];
                        dx[r * k..(r + 1) * k].iter_mut().zip(wj).for_each(|(d, wv)| *d += gj * wv);
                    }
                }
            }
            if nodes[weight.0].needs_grad {
                let x = val(*input);
                let dw = slot(nodes, adj, *weight).unwrap();
                for r in 0..rows {
                    let xr = &x[r * k..(r + 1) * k];
                    for j in 0..m {
                        let gj = g[r * m + j];
                        dw[j * k..(j + 1) * k].iter_mut().zip(xr).for_each(|(d, xv)| *d += gj * xv);
                    }
                }
            }
        }
        Op::Reshape { input } => {
            if let Some(dx) = slot(nodes, adj, *input) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
        }
        Op::Concat { inputs, outer, blocks } => {
            let total: usize = blocks.iter().sum();
            let mut offset = 0;
            for (v, &b) in inputs.iter().zip(blocks) {
                if let Some(dx) = slot(nodes, adj, *v) {
                    for o in 0..*outer {
                        let src = &g[o * total + offset..o * total + offset + b];
                        dx[o * b..(o + 1) * b].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += b;
            }
        }
        Op::Narrow {
            input,
            outer,
            in_block,
            offset,
            block,
        } => {
            if let Some(dx) = slot(nodes, adj, *input) {
                for o in 0..*outer {
                    let dst = &mut dx[o * in_block + offset..o * in_block + offset + block];
                    dst.iter_mut().zip(&g[o * block..(o + 1) * block]).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Repeat {
            input,
            outer,
            inner,
            times,
        } => {
            if let Some(dx) = slot(nodes, adj, *input) {
                for o in 0..*outer {
                    for r in 0..*times {
                        let src = &g[(o * times + r) * inner..(o * times + r + 1) * inner];
                        dx[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
        Op::WeightedSum { weights, input, inner } => {
            if nodes[weights.0].needs_grad {
                let x = val(*input);
                let dw = slot(nodes, adj, *weights).unwrap();
                for (d, xi) in dw.iter_mut().zip(x.chunks(*inner)) {
                    *d += xi.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if nodes[input.0].needs_grad {
                let w = val(*weights).to_vec();
                let dx = slot(nodes, adj, *input).unwrap();
                for (wi, dxi) in w.iter().zip(dx.chunks_mut(*inner)) {
                    dxi.iter_mut().zip(g).for_each(|(d, gi)| *d += wi * gi);
                }
            }
        }
    }
}
