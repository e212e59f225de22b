use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::conv::{conv2d_backward, conv2d_forward, conv2d_output_extent};
use super::kernels::{self, broadcastable, for_each_broadcast, reduce_into, split_axis};
use super::{pad4, Real, Tensor};
use crate::error::{Error, Result};

/// Exponential-moving-average factor for batch-norm running moments.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance floor added inside the batch-norm square root.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial axis collapsed by [`Graph::directional_avgpool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Average over rows: `[N,C,H,W] → [N,C,1,W]`.
    Height,
    /// Average over columns: `[N,C,H,W] → [N,C,H,1]`.
    Width,
}

/// Non-trainable per-channel batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningMoments<T = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningMoments<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(vec![channels]).expect("positive channel count"),
            var: Tensor::ones(vec![channels]).expect("positive channel count"),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Real>(&self) -> RunningMoments<U> {
        RunningMoments {
            mean: self.mean.cast(),
            var: self.var.cast(),
        }
    }
}

/// How a batch-norm call treats its running moments.
pub enum BnState<'a, T> {
    /// Normalize with batch statistics and fold them into the moments.
    Train(&'a mut RunningMoments<T>),
    /// Normalize with the stored moments.
    Eval(&'a RunningMoments<T>),
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    HardSwish(Var),
    Sigmoid(Var),
    SoftmaxChannel(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    DirAvgPool {
        x: Var,
        axis: Axis,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    SumAxes(Var),
    MeanAll(Var),
    Ln(Var),
    Pow {
        x: Var,
        exponent: T,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only tape of executed operations.
///
/// Nodes are stored in execution order, so every operation's inputs precede
/// it; [`Graph::backward`] walks the tape once in reverse. A graph is confined
/// to one thread; build one per forward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, op)
    }

    /// Records a leaf. Non-finite payloads are rejected here.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("graph input")?;
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`]; `None` when the
    /// node does not require a gradient or is unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn rank4(&self, v: Var, op: &str, operand: &str) -> Result<[usize; 4]> {
        let d = self.dims(v);
        if d.len() != 4 {
            return Err(Error::dim(format!(
                "{op}: operand `{operand}` must be rank 4 (N,C,H,W), got {d:?}"
            )));
        }
        Ok([d[0], d[1], d[2], d[3]])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let [_, cin, h, wd] = self.rank4(x, "conv2d", "input")?;
        let [cout, wcin, kh, kw] = self.rank4(w, "conv2d", "weight")?;
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv2d: operand `weight` expects {wcin} input channels, input has {cin}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be at least 1"));
        }
        if conv2d_output_extent(h, kh, stride, padding).is_none()
            || conv2d_output_extent(wd, kw, stride, padding).is_none()
        {
            return Err(Error::dim(format!(
                "conv2d: operand `weight` kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        if let Some(b) = b {
            if self.dims(b) != [cout] {
                return Err(Error::dim(format!(
                    "conv2d: operand `bias` must have dims [{cout}], got {:?}",
                    self.dims(b)
                )));
            }
        }
        self.value(x).ensure_finite("conv2d input")?;
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.derived(out, &inputs, Op::Conv2d { x, w, b, stride, padding }))
    }

    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, state: BnState<'_, T>) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "batchnorm2d", "input")?;
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.dims(v) != [c] {
                return Err(Error::dim(format!(
                    "batchnorm2d: operand `{name}` must have dims [{c}], got {:?}",
                    self.dims(v)
                )));
            }
        }
        let m = n * h * w;
        let hw = h * w;
        let eps = T::lit(BN_EPS);
        let xs = self.value(x).data();
        let (mean, inv_std, batch_stats) = match state {
            BnState::Train(moments) => {
                if m < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batchnorm2d in training mode needs N·H·W ≥ 2, got {m}"
                    )));
                }
                if moments.channels() != c {
                    return Err(Error::dim(format!(
                        "batchnorm2d: running moments hold {} channels, input has {c}",
                        moments.channels()
                    )));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv_m = T::one() / T::lit(m as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        s += xs[base..base + hw].iter().copied().sum::<T>();
                    }
                    mean[ch] = s * inv_m;
                    let mut q = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for &v in &xs[base..base + hw] {
                            let d = v - mean[ch];
                            q += d * d;
                        }
                    }
                    var[ch] = q * inv_m;
                }
                let mom = T::lit(BN_MOMENTUM);
                let unbias = T::lit(m as f64 / (m - 1) as f64);
                for ch in 0..c {
                    let rm = &mut moments.mean.data_mut()[ch];
                    *rm = (T::one() - mom) * *rm + mom * mean[ch];
                    let rv = &mut moments.var.data_mut()[ch];
                    *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv_std, true)
            }
            BnState::Eval(moments) => {
                if moments.channels() != c {
                    return Err(Error::dim(format!(
                        "batchnorm2d: running moments hold {} channels, input has {c}",
                        moments.channels()
                    )));
                }
                let inv_std = moments
                    .var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                (moments.mean.data().to_vec(), inv_std, false)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![n, c, h, w], out);
        Ok(self.derived(
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.derived(out, &[x], Op::Relu(x)))
    }

    /// `x · relu6(x + 3) / 6`.
    pub fn hardswish(&mut self, x: Var) -> Result<Var> {
        let three = T::lit(3.0);
        let six = T::lit(6.0);
        let out = self
            .value(x)
            .map(|v| v * (v + three).max(T::zero()).min(six) / six);
        Ok(self.derived(out, &[x], Op::HardSwish(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        Ok(self.derived(out, &[x], Op::Sigmoid(x)))
    }

    /// Per-pixel softmax across the channel axis of an `[N,C,H,W]` tensor.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let d = self.rank4(x, "softmax_channel", "input")?;
        let out = kernels::softmax_channel(self.value(x).data(), d);
        let value = Tensor::from_parts_unchecked(d.to_vec(), out);
        Ok(self.derived(value, &[x], Op::SoftmaxChannel(x)))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "maxpool2", "input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!(
                "maxpool2: spatial extents must be even, got {h}x{w}"
            )));
        }
        let r = kernels::maxpool2(self.value(x).data(), [n, c, h, w]);
        let value = Tensor::from_parts_unchecked(vec![n, c, h / 2, w / 2], r.out);
        Ok(self.derived(value, &[x], Op::MaxPool2 { x, argmax: r.argmax }))
    }

    /// ×2 bilinear upsampling, corner-aligned (`align_corners = true`).
    pub fn upsample_bilinear2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "upsample_bilinear2", "input")?;
        let out = kernels::upsample_bilinear2(self.value(x).data(), [n, c, h, w]);
        let value = Tensor::from_parts_unchecked(vec![n, c, 2 * h, 2 * w], out);
        Ok(self.derived(value, &[x], Op::Upsample2(x)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat: no operands"))?;
        let ref_dims = self.dims(first).to_vec();
        if axis >= ref_dims.len() {
            return Err(Error::dim(format!(
                "concat: axis {axis} out of range for rank {}",
                ref_dims.len()
            )));
        }
        let mut total = 0;
        for (i, &p) in parts.iter().enumerate() {
            let d = self.dims(p);
            let agree = d.len() == ref_dims.len()
                && d.iter()
                    .zip(&ref_dims)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !agree {
                return Err(Error::dim(format!(
                    "concat: operand {i} has dims {d:?}, incompatible with {ref_dims:?} along axis {axis}"
                )));
            }
            total += d[axis];
        }
        let mut out_dims = ref_dims.clone();
        out_dims[axis] = total;
        let (outer, _, inner) = split_axis(&out_dims, axis);
        let mut out = Vec::with_capacity(out_dims.iter().product());
        for o in 0..outer {
            for &p in parts {
                let d = self.dims(p);
                let chunk = d[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_parts_unchecked(out_dims, out);
        Ok(self.derived(
            value,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rank4(a, "concat_channels", "a")?;
        self.rank4(b, "concat_channels", "b")?;
        self.concat(&[a, b], 1)
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if axis >= d.len() || len == 0 || start + len > d[axis] {
            return Err(Error::dim(format!(
                "narrow: range {start}..{} invalid for axis {axis} of {d:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = split_axis(&d, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = self.value(x).data();
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_dims = d;
        out_dims[axis] = len;
        let value = Tensor::from_parts_unchecked(out_dims, out);
        Ok(self.derived(value, &[x], Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims.to_vec())?;
        Ok(self.derived(value, &[x], Op::Reshape(x)))
    }

    /// Mean over one spatial axis, keeping it as extent 1.
    pub fn directional_avgpool(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "directional_avgpool", "input")?;
        let src = self.value(x).data();
        let value = match axis {
            Axis::Width => {
                let inv = T::one() / T::lit(w as f64);
                let out = src.chunks(w).map(|row| row.iter().copied().sum::<T>() * inv).collect();
                Tensor::from_parts_unchecked(vec![n, c, h, 1], out)
            }
            Axis::Height => {
                let inv = T::one() / T::lit(h as f64);
                let mut out = vec![T::zero(); n * c * w];
                for plane in 0..n * c {
                    for y in 0..h {
                        for x in 0..w {
                            out[plane * w + x] += src[(plane * h + y) * w + x];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v *= inv);
                Tensor::from_parts_unchecked(vec![n, c, 1, w], out)
            }
        };
        Ok(self.derived(value, &[x], Op::DirAvgPool { x, axis }))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (da, db) = (self.dims(a), self.dims(b));
        if !broadcastable(da, db) {
            return Err(Error::dim(format!(
                "{name}: operand `b` with dims {db:?} does not broadcast into {da:?}"
            )));
        }
        let (fa, fb) = (pad4(da), pad4(db));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); va.len()];
        for_each_broadcast(fa, fb, |i, j| out[i] = f(va[i], vb[j]));
        Ok(Tensor::from_parts_unchecked(da.to_vec(), out))
    }

    /// `a + b` with `b` broadcast into `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.derived(value, &[a, b], Op::Add(a, b)))
    }

    /// `a ⊙ b` with `b` broadcast into `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.derived(value, &[a, b], Op::Mul(a, b)))
    }

    /// Elementwise `a / b` for equal shapes.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::dim(format!(
                "div: operand dims {:?} and {:?} differ",
                self.dims(a),
                self.dims(b)
            )));
        }
        let value = self.broadcast_binary(a, b, "div", |x, y| x / y)?;
        Ok(self.derived(value, &[a, b], Op::Div(a, b)))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        Ok(self.derived(value, &[x], Op::Affine { x, scale }))
    }

    /// Sum over `axes`, keeping them as extent 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= d.len()) {
            return Err(Error::dim(format!("sum_axes: axis {bad} out of range for {d:?}")));
        }
        let mut out_dims = d.clone();
        for &a in axes {
            out_dims[a] = 1;
        }
        let mut out = vec![T::zero(); out_dims.iter().product()];
        reduce_into(self.value(x).data(), pad4(&d), pad4(&out_dims), &mut out);
        let value = Tensor::from_parts_unchecked(out_dims, out);
        Ok(self.derived(value, &[x], Op::SumAxes(x)))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mean = v.sum() / T::lit(v.len() as f64);
        Ok(self.derived(Tensor::scalar(mean), &[x], Op::MeanAll(x)))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.ln());
        Ok(self.derived(value, &[x], Op::Ln(x)))
    }

    /// `x^exponent`. The derivative at `x = 0` is taken as 0 when `exponent < 1`.
    pub fn pow(&mut self, x: Var, exponent: T) -> Result<Var> {
        let value = self.value(x).map(|v| v.powf(exponent));
        Ok(self.derived(value, &[x], Op::Pow { x, exponent }))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        Ok(self.derived(value, &[x], Op::Clamp { x, lo, hi }))
    }

    /// Hash of every branch decision taken by piecewise operations (relu and
    /// hard-swish regions, max-pool winners, clamp regions). Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::HardSwish(x) => {
                    for &v in self.value(*x).data() {
                        let region = if v <= T::lit(-3.0) {
                            0u8
                        } else if v >= T::lit(3.0) {
                            2
                        } else {
                            1
                        };
                        region.hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                Op::Clamp { x, lo, hi } => {
                    for &v in self.value(*x).data() {
                        let region = if v < *lo {
                            0u8
                        } else if v > *hi {
                            2
                        } else {
                            1
                        };
                        region.hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a one-element `loss`. Fills the gradient slot of
    /// every `requires_grad` node reachable from it; fan-out accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                lv.dims()
            )));
        }
        lv.ensure_finite("loss")?;
        let loss_dims = lv.dims().to_vec();
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::from_parts_unchecked(loss_dims, vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &upstream);
            self.grads[idx] = Some(upstream);
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Intermediate nodes keep their gradients; drop those that never asked.
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, dy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let like = |v: Var, data: Vec<T>| Tensor::from_parts_unchecked(self.dims(v).to_vec(), data);
        let g = dy.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, stride, padding } => {
                let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), b.is_some(), *stride, *padding, dy);
                let mut v = vec![(*x, dx), (*w, dw)];
                if let (Some(b), Some(db)) = (b, db) {
                    v.push((*b, db));
                }
                v
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = pad4(out.dims());
                let hw = h * w;
                let m = T::lit((n * hw) as f64);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let k = gam[ch] * inv_std[ch];
                        for i in base..base + hw {
                            dx[i] = if *batch_stats {
                                // dgamma/dbeta are Σ dy·x̂ and Σ dy.
                                k * (g[i] - (dbeta[ch] + xhat[i] * dgamma[ch]) / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                vec![(*x, like(*x, dx)), (*gamma, like(*gamma, dgamma)), (*beta, like(*beta, dbeta))]
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
                vec![(*x, like(*x, dx))]
            }
            Op::HardSwish(x) => {
                let xv = self.value(*x).data();
                let (three, six) = (T::lit(3.0), T::lit(6.0));
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| {
                        if v <= -three {
                            T::zero()
                        } else if v >= three {
                            d
                        } else {
                            d * (T::lit(2.0) * v + three) / six
                        }
                    })
                    .collect();
                vec![(*x, like(*x, dx))]
            }
            Op::Sigmoid(x) => {
                let dx = out.data().iter().zip(g).map(|(&s, &d)| d * s * (T::one() - s)).collect();
                vec![(*x, like(*x, dx))]
            }
            Op::SoftmaxChannel(x) => {
                let dx = kernels::softmax_channel_backward(out.data(), g, pad4(out.dims()));
                vec![(*x, like(*x, dx))]
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] += d;
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Upsample2(x) => {
                let dx = kernels::upsample_bilinear2_backward(g, pad4(self.dims(*x)));
                vec![(*x, like(*x, dx))]
            }
            Op::Concat { parts, axis } => {
                let (outer, ext, inner) = split_axis(out.dims(), *axis);
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let pe = self.dims(p)[*axis];
                        let mut d = Vec::with_capacity(outer * pe * inner);
                        for o in 0..outer {
                            let base = (o * ext + offset) * inner;
                            d.extend_from_slice(&g[base..base + pe * inner]);
                        }
                        offset += pe;
                        (p, like(p, d))
                    })
                    .collect()
            }
            Op::Narrow { x, axis, start } => {
                let xd = self.dims(*x);
                let (outer, ext, inner) = split_axis(xd, *axis);
                let len = out.dims()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Reshape(x) => vec![(*x, like(*x, g.to_vec()))],
            Op::DirAvgPool { x, axis } => {
                let [_, _, h, w] = pad4(self.dims(*x));
                let mut dx = vec![T::zero(); self.value(*x).len()];
                match axis {
                    Axis::Width => {
                        let inv = T::one() / T::lit(w as f64);
                        for (row, &d) in dx.chunks_mut(w).zip(g) {
                            row.fill(d * inv);
                        }
                    }
                    Axis::Height => {
                        let inv = T::one() / T::lit(h as f64);
                        for (i, v) in dx.iter_mut().enumerate() {
                            let plane = i / (h * w);
                            *v = g[plane * w + i % w] * inv;
                        }
                    }
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Add(a, b) => {
                let mut db = vec![T::zero(); self.value(*b).len()];
                reduce_into(g, pad4(out.dims()), pad4(self.dims(*b)), &mut db);
                vec![(*a, like(*a, g.to_vec())), (*b, like(*b, db))]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); va.len()];
                let mut db = vec![T::zero(); vb.len()];
                for_each_broadcast(pad4(out.dims()), pad4(self.dims(*b)), |i, j| {
                    da[i] = g[i] * vb[j];
                    db[j] += g[i] * va[i];
                });
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = g.iter().zip(vb).map(|(&d, &y)| d / y).collect();
                let db = g
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(&d, (&x, &y))| -d * x / (y * y))
                    .collect();
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Affine { x, scale } => {
                let dx = g.iter().map(|&d| d * *scale).collect();
                vec![(*x, like(*x, dx))]
            }
            Op::SumAxes(x) => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for_each_broadcast(pad4(self.dims(*x)), pad4(out.dims()), |i, j| dx[i] = g[j]);
                vec![(*x, like(*x, dx))]
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let d = g[0] / T::lit(n as f64);
                vec![(*x, like(*x, vec![d; n]))]
            }
            Op::Ln(x) => {
                let dx = self.value(*x).data().iter().zip(g).map(|(&v, &d)| d / v).collect();
                vec![(*x, like(*x, dx))]
            }
            Op::Pow { x, exponent } => {
                let p = *exponent;
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| {
                        if p == T::zero() || (v == T::zero() && p < T::one()) {
                            T::zero()
                        } else {
                            d * p * v.powf(p - T::one())
                        }
                    })
                    .collect();
                vec![(*x, like(*x, dx))]
            }
            Op::Clamp { x, lo, hi } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v >= *lo && v <= *hi { d } else { T::zero() })
                    .collect();
                vec![(*x, like(*x, dx))]
            }
        }
    }
}
