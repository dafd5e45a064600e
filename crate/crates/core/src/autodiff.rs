//! Dynamic reverse-mode differentiation over tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough context to compute input
//! gradients; [`Tape::backward`] walks the nodes in reverse. Nodes that do not
//! depend on any gradient-requiring leaf are skipped.
//!
//! Every operation checks its output for NaN/Inf and fails instead of
//! propagating them.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::{self, AttentionCache, AttentionWeights, LayerNormCache};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Offset subtracted by [`Tape::stable_log_scale`] so that a zero input maps
/// to exactly zero.
pub const SCALE_SHIFT: f64 = 2.0;

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x + 2) − log σ(2)`: bounded above by `−log σ(2) ≈ 0.127`, zero at zero.
pub fn stable_log_scale(x: f64) -> f64 {
    log_sigmoid(x + SCALE_SHIFT) - log_sigmoid(SCALE_SHIFT)
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    LogAbs(Var),
    Square(Var),
    Relu(Var),
    StableLogScale(Var),
    SumAll(Var),
    MeanAll(Var),
    SumPerItem(Var),
    BroadcastItems(Var),
    MulChannel(Var, Var),
    AddChannel(Var, Var),
    SliceChannels(Var, usize, usize),
    ConcatChannels(Var, Var),
    Reshape(Var),
    Squeeze2(Var),
    Conv2d(Var, Var),
    ChannelMix(Var, Var),
    LogAbsDet(Var, Tensor),
    LayerNorm(Var, Var, Var, LayerNormCache),
    Attention([Var; 5], Box<AttentionCache>),
    MatMul(Var, Var),
    /// Output element `o` copies input element `arg[o]`.
    ArgMaxPool(Var, Vec<usize>),
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy(Var, Tensor, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A leaf treated as constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * k);
        self.push("scale", v, Op::Scale(a, k), &[a])
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + k);
        self.push("add_const", v, Op::AddConst(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log_abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.abs().ln());
        self.push("log_abs", v, Op::LogAbs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push("square", v, Op::Square(a), &[a])
    }

    /// ReLU; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// Elementwise [`stable_log_scale`].
    pub fn stable_log_scale(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(stable_log_scale);
        self.push("stable_log_scale", v, Op::StableLogScale(a), &[a])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum_all", v, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push("mean_all", v, Op::MeanAll(a), &[a])
    }

    /// Per-batch-item sum, producing a `[B]` vector.
    pub fn sum_per_item(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let b = t.batch();
        let m = t.item_len();
        let v = Tensor::from_fn(&[b], |i| t.data()[i * m..(i + 1) * m].iter().sum());
        self.push("sum_per_item", v, Op::SumPerItem(a), &[a])
    }

    /// Repeats a scalar into a `[batch]` vector.
    pub fn broadcast_items(&mut self, a: Var, batch: usize) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(Error::InvalidShape {
                op: "broadcast_items",
                detail: format!("expected a scalar, got {:?}", self.shape(a)),
            });
        }
        let v = Tensor::full(&[batch], self.value(a).item());
        self.push("broadcast_items", v, Op::BroadcastItems(a), &[a])
    }

    fn check_channel_vec(&self, x: Var, p: Var, op: &'static str) -> Result<()> {
        if self.value(p).len() != self.value(x).channels() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(p).to_vec(),
            });
        }
        Ok(())
    }

    /// `x * s` with `s` broadcast along the last axis.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_channel_vec(x, s, "mul_channel")?;
        let c = self.value(x).channels();
        let mut v = self.value(x).clone();
        let sv = self.value(s).data();
        for row in v.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(sv).for_each(|(a, b)| *a *= b);
        }
        self.push("mul_channel", v, Op::MulChannel(x, s), &[x, s])
    }

    /// `x + b` with `b` broadcast along the last axis.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_channel_vec(x, b, "add_channel")?;
        let c = self.value(x).channels();
        let mut v = self.value(x).clone();
        let bv = self.value(b).data();
        for row in v.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(bv).for_each(|(a, b)| *a += b);
        }
        self.push("add_channel", v, Op::AddChannel(x, b), &[x, b])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let c = self.value(x).channels();
        if start > end || end > c {
            return Err(Error::InvalidShape {
                op: "slice_channels",
                detail: format!("range {start}..{end} outside {c} channels"),
            });
        }
        let v = self.value(x).slice_channels(start, end);
        self.push("slice_channels", v, Op::SliceChannels(x, start, end), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Tensor::concat_channels(self.value(a), self.value(b))?;
        self.push("concat_channels", v, Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn squeeze2(&mut self, x: Var) -> Result<Var> {
        let v = kernels::squeeze2(self.value(x))?;
        self.push("squeeze", v, Op::Squeeze2(x), &[x])
    }

    pub fn conv2d(&mut self, x: Var, filters: Var) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(filters))?;
        self.push("conv2d", v, Op::Conv2d(x, filters), &[x, filters])
    }

    /// 1×1 convolution by a square matrix (see [`kernels::channel_mix`]).
    pub fn channel_mix(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = kernels::channel_mix(self.value(x), self.value(w))?;
        self.push("channel_mix", v, Op::ChannelMix(x, w), &[x, w])
    }

    /// `log|det W|` of a square matrix, via LU. Fails if `|det W|` is at or
    /// below `min_abs_det`.
    pub fn log_abs_det(&mut self, w: Var, min_abs_det: f64, layer: &str) -> Result<Var> {
        let (det, inv_t) = {
            let t = self.value(w);
            let n = match t.shape() {
                [a, b] if a == b => *a,
                s => {
                    return Err(Error::InvalidShape {
                        op: "log_abs_det",
                        detail: format!("expected square matrix, got {s:?}"),
                    })
                }
            };
            let m = DMatrix::from_row_slice(n, n, t.data());
            let lu = m.lu();
            let det = lu.determinant();
            if !(det.abs() > min_abs_det) {
                return Err(Error::Singular {
                    layer: layer.to_string(),
                    det,
                });
            }
            let inv = lu.try_inverse().ok_or_else(|| Error::Singular {
                layer: layer.to_string(),
                det,
            })?;
            // d log|det W| / dW = W^{-T}; row-major W^{-T}[i][j] = inv[j][i].
            let inv_t = Tensor::from_fn(&[n, n], |k| inv[(k % n, k / n)]);
            (det, inv_t)
        };
        let v = Tensor::scalar(det.abs().ln());
        self.push("log_abs_det", v, Op::LogAbsDet(w, inv_t), &[w])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (v, cache) = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        self.push("layer_norm", v, Op::LayerNorm(x, gain, bias, cache), &[x, gain, bias])
    }

    /// Multi-head self-attention over a `B×T×D` input; see
    /// [`kernels::multi_head_self_attention`].
    pub fn attention(&mut self, x: Var, weights: [Var; 4], heads: usize) -> Result<Var> {
        let (v, cache) = kernels::multi_head_self_attention(
            self.value(x),
            AttentionWeights {
                query: self.value(weights[0]),
                key: self.value(weights[1]),
                value: self.value(weights[2]),
                output: self.value(weights[3]),
            },
            heads,
        )?;
        let inputs = [x, weights[0], weights[1], weights[2], weights[3]];
        self.push("attention", v, Op::Attention(inputs, Box::new(cache)), &inputs)
    }

    /// `a[n,k] · b[k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k, m) = match (self.shape(a), self.shape(b)) {
            ([n, k], [k2, m]) if k == k2 => (*n, *k, *m),
            (l, r) => {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: l.to_vec(),
                    rhs: r.to_vec(),
                })
            }
        };
        let mut out = vec![0.0; n * m];
        kernels::gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push("matmul", Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (v, arg) = kernels::max_pool2(self.value(x))?;
        self.push("max_pool2", v, Op::ArgMaxPool(x, arg), &[x])
    }

    /// BHWC → B×C spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = self.value(x).dims4()?;
        let d = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for p in 0..h * w {
                for ch in 0..c {
                    out[bi * c + ch] += d[(bi * h * w + p) * c + ch];
                }
            }
        }
        let n = (h * w) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        self.push("global_avg_pool", Tensor::from_parts(vec![b, c], out), Op::GlobalAvgPool(x), &[x])
    }

    /// BHWC → B×C spatial maximum. Ties go to the first position.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = self.value(x).dims4()?;
        if h * w == 0 {
            return Err(Error::InvalidShape {
                op: "global_max_pool",
                detail: "empty spatial extent".into(),
            });
        }
        let d = self.value(x).data();
        let mut arg = vec![0usize; b * c];
        for bi in 0..b {
            for ch in 0..c {
                let base = bi * h * w * c + ch;
                let best = (0..h * w)
                    .map(|p| base + p * c)
                    .reduce(|a, i| if d[i] > d[a] { i } else { a })
                    .unwrap_or(base);
                arg[bi * c + ch] = best;
            }
        }
        let out = arg.iter().map(|&i| d[i]).collect();
        self.push("global_max_pool", Tensor::from_parts(vec![b, c], out), Op::ArgMaxPool(x, arg), &[x])
    }

    /// Mean cross-entropy of `[n, k]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.shape(logits) {
            [n, k] => (*n, *k),
            s => {
                return Err(Error::InvalidShape {
                    op: "softmax_cross_entropy",
                    detail: format!("expected [n, k] logits, got {s:?}"),
                })
            }
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {n} rows of {k} classes",
                labels.len()
            )));
        }
        let probs = kernels::softmax_rows(self.value(logits));
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs.data()[i * k + l].max(1e-300).ln())
            .sum::<f64>()
            / n as f64;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy(logits, probs, labels.to_vec()),
            &[logits],
        )
    }

    /// Reverse accumulation from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                detail: format!("loss must be a scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            g.check_finite("backward")?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)?),
            Op::LogAbs(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)?),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)?),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })?),
            Op::StableLogScale(a) => acc(
                *a,
                // d/dx log σ(x + k) = 1 − σ(x + k)
                g.zip_map(val(*a), |x, y| x * (1.0 - sigmoid(y + SCALE_SHIFT)))?,
            ),
            Op::SumAll(a) => {
                let gv = g.item();
                acc(*a, Tensor::full(val(*a).shape(), gv));
            }
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::SumPerItem(a) => {
                let m = val(*a).item_len();
                acc(*a, Tensor::from_fn(val(*a).shape(), |i| g.data()[i / m]));
            }
            Op::BroadcastItems(a) => {
                acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), vec![g.sum()]));
            }
            Op::MulChannel(x, s) => {
                let c = val(*x).channels();
                if self.wants(*x) {
                    let sv = val(*s).data();
                    acc(*x, Tensor::from_fn(g.shape(), |i| g.data()[i] * sv[i % c]));
                }
                if self.wants(*s) {
                    let mut gs = vec![0.0; c];
                    for (i, (gv, xv)) in g.data().iter().zip(val(*x).data()).enumerate() {
                        gs[i % c] += gv * xv;
                    }
                    acc(*s, Tensor::from_parts(val(*s).shape().to_vec(), gs));
                }
            }
            Op::AddChannel(x, b) => {
                acc(*x, g.clone());
                if self.wants(*b) {
                    let c = val(*x).channels();
                    let mut gb = vec![0.0; c];
                    for (i, gv) in g.data().iter().enumerate() {
                        gb[i % c] += gv;
                    }
                    acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), gb));
                }
            }
            Op::SliceChannels(x, start, end) => {
                let c = val(*x).channels();
                let w = end - start;
                let mut gx = vec![0.0; val(*x).len()];
                if w > 0 {
                    for (r, chunk) in g.data().chunks(w).enumerate() {
                        gx[r * c + start..r * c + end].copy_from_slice(chunk);
                    }
                }
                acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), gx));
            }
            Op::ConcatChannels(a, b) => {
                let ca = val(*a).channels();
                let cb = val(*b).channels();
                acc(*a, g.slice_channels(0, ca));
                acc(*b, g.slice_channels(ca, ca + cb));
            }
            Op::Reshape(x) => acc(*x, g.reshape(val(*x).shape())?),
            Op::Squeeze2(x) => acc(*x, kernels::unsqueeze2(g)?),
            Op::Conv2d(x, f) => {
                let (gx, gf) =
                    kernels::conv2d_backward(val(*x), val(*f), g, self.wants(*x), self.wants(*f));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gf) = gf {
                    acc(*f, gf);
                }
            }
            Op::ChannelMix(x, w) => {
                let c = val(*x).channels();
                let rows = g.len() / c;
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    kernels::gemm_acc(g.data(), val(*w).data(), &mut gx, rows, c, c);
                    acc(*x, Tensor::from_parts(g.shape().to_vec(), gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; c * c];
                    kernels::gemm_at_acc(g.data(), val(*x).data(), &mut gw, rows, c, c);
                    acc(*w, Tensor::from_parts(vec![c, c], gw));
                }
            }
            Op::LogAbsDet(w, inv_t) => acc(*w, inv_t.map(|v| v * g.item())),
            Op::LayerNorm(x, gain, bias, cache) => {
                let (gx, ggain, gbias) = kernels::layer_norm_backward(cache, val(*gain), g);
                acc(*x, gx);
                acc(*gain, ggain);
                acc(*bias, gbias);
            }
            Op::Attention(inputs, cache) => {
                let w = AttentionWeights {
                    query: val(inputs[1]),
                    key: val(inputs[2]),
                    value: val(inputs[3]),
                    output: val(inputs[4]),
                };
                let (gx, gw) = kernels::multi_head_self_attention_backward(val(inputs[0]), w, cache, g);
                acc(inputs[0], gx);
                for (v, t) in inputs[1..].iter().zip(gw) {
                    acc(*v, t);
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let m = val(*b).shape()[1];
                if self.wants(*a) {
                    let mut ga = vec![0.0; n * k];
                    kernels::gemm_bt_acc(g.data(), val(*b).data(), &mut ga, n, m, k);
                    acc(*a, Tensor::from_parts(vec![n, k], ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * m];
                    kernels::gemm_at_acc(val(*a).data(), g.data(), &mut gb, n, k, m);
                    acc(*b, Tensor::from_parts(vec![k, m], gb));
                }
            }
            Op::ArgMaxPool(x, arg) => {
                let mut gx = vec![0.0; val(*x).len()];
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g.data()[o];
                }
                acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), gx));
            }
            Op::GlobalAvgPool(x) => {
                let (_, h, w, c) = val(*x).dims4()?;
                let n = (h * w) as f64;
                acc(
                    *x,
                    Tensor::from_fn(val(*x).shape(), |i| {
                        let bi = i / (h * w * c);
                        g.data()[bi * c + i % c] / n
                    }),
                );
            }
            Op::SoftmaxCrossEntropy(logits, probs, labels) => {
                let k = probs.channels();
                let n = labels.len() as f64;
                let mut gl = probs.data().to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= 1.0;
                }
                let s = g.item() / n;
                gl.iter_mut().for_each(|v| *v *= s);
                acc(*logits, Tensor::from_parts(probs.shape().to_vec(), gl));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn quadratic_gradient_is_value() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.square(p).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn unreachable_param_gets_no_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::ones(&[2]));
        let q = tape.param(Tensor::ones(&[2]));
        let loss = tape.sum_all(q).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(p).is_none());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(&[1], vec![0.0]).unwrap());
        assert!(matches!(tape.log_abs(p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn stable_log_scale_zero_is_exact() {
        assert_eq!(stable_log_scale(0.0), 0.0);
        assert!(stable_log_scale(50.0) < 0.13);
        assert!(stable_log_scale(-50.0) < -40.0);
    }

    #[test]
    fn log_abs_det_rejects_singular() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(&[2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap());
        assert!(matches!(
            tape.log_abs_det(w, 1e-12, "test"),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn relu_kink_has_zero_derivative() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let r = tape.relu(p).unwrap();
        let loss = tape.sum_all(r).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = SeededRng::new(9);
        let x = Tensor::randn(&[2, 4, 4, 3], 1.0, &mut rng);
        let f = Tensor::randn(&[3, 3, 3, 2], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let fv = tape.param(f.clone());
            let y = tape.conv2d(xv, fv).unwrap();
            let y = tape.relu(y).unwrap();
            let loss = tape.sum_all(y).unwrap();
            tape.backward(loss).unwrap().take(fv).unwrap()
        };
        assert_eq!(run(), run());
    }

    /// Central-difference check of `d sum(w ⊙ op(x)) / dx` for a pooling op.
    fn pooling_gradient_matches(op: fn(&mut Tape, Var) -> Result<Var>) {
        let mut rng = SeededRng::new(21);
        let x = Tensor::randn(&[2, 4, 6, 3], 1.0, &mut rng);
        let probe = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.param(x.clone());
            let y = op(&mut tape, v).unwrap();
            (tape, v, y)
        };
        let (t0, _, y0) = probe(&x);
        let w = Tensor::randn(t0.value(y0).shape(), 1.0, &mut SeededRng::new(22));
        let value = |x: &Tensor| {
            let (tape, _, y) = probe(x);
            tape.value(y).dot(&w)
        };
        let (mut tape, v, y) = probe(&x);
        let wc = tape.constant(w.clone());
        let prod = tape.mul(y, wc).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let g = tape.backward(loss).unwrap().take(v).unwrap();
        const H: f64 = 1e-6;
        for i in 0..x.len() {
            let (mut up, mut down) = (x.clone(), x.clone());
            up.data_mut()[i] += H;
            down.data_mut()[i] -= H;
            let numeric = (value(&up) - value(&down)) / (2.0 * H);
            assert!((numeric - g.data()[i]).abs() < 1e-6, "element {i}: {numeric} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn pooling_gradients_match_finite_differences() {
        pooling_gradient_matches(|t, x| t.max_pool2(x));
        pooling_gradient_matches(|t, x| t.global_avg_pool(x));
        pooling_gradient_matches(|t, x| t.global_max_pool(x));
    }

    #[test]
    fn global_max_pool_picks_channel_maxima() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0, 5.0, 3.0, -2.0]).unwrap());
        let y = tape.global_max_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
    }
}
