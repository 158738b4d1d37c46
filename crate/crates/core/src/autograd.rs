//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a [`DiffNode`] appended to a tape.
//! Nodes only ever reference earlier nodes, so walking the tape backwards is
//! a reverse topological traversal. Trainable tensors live in [`Params`],
//! outside any graph; a graph reads (leading slices of) them through
//! [`Graph::param`] and [`Graph::backward`] adds gradients back into the
//! parameter gradient buffers. Buffers are only cleared by
//! [`Params::zero_grad`], so several backward passes accumulate.

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Index of a trainable tensor inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors with their gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array>,
    grads: Vec<Array>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        self.grads.push(Array::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.into());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array, &Array)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
            .zip(self.grads.iter())
            .map(|((n, v), g)| (n, v, g))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; every parent has a smaller index.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv3x3(Var, Var),
    Relu(Var),
    AvgPool2(Var),
    Reshape(Var),
    ChanNorm(Box<ChanNormCache>),
    ChannelMean(Var),
    Mse(Var, Var),
    L1(Var, Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Scale(Var, f64),
    Add(Var, Var),
}

#[derive(Clone, Debug)]
pub(crate) struct ChanNormCache {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    batch_stats: bool,
}

/// One recorded operation: its value and the operation that produced it.
#[derive(Clone, Debug)]
pub struct DiffNode {
    value: Array,
    op: Op,
}

impl DiffNode {
    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn op_tag(&self) -> &'static str {
        match self.op {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Conv3x3(..) => "conv2d",
            Op::Relu(_) => "relu",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Reshape(_) => "reshape",
            Op::ChanNorm(_) => "chan_norm",
            Op::ChannelMean(_) => "channel_mean",
            Op::Mse(..) => "mse",
            Op::L1(..) => "l1",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Add(..) => "add",
        }
    }

    pub fn parents(&self) -> Vec<Var> {
        match &self.op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Conv3x3(a, b)
            | Op::Mse(a, b)
            | Op::L1(a, b)
            | Op::Add(a, b) => vec![*a, *b],
            Op::Relu(x)
            | Op::AvgPool2(x)
            | Op::Reshape(x)
            | Op::ChannelMean(x)
            | Op::Sum(x)
            | Op::Scale(x, _) => vec![*x],
            Op::ChanNorm(c) => vec![c.x, c.gamma, c.beta],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

/// Normalization statistics to use in [`Graph::chan_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormInput<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed per-channel mean and variance.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

pub const NORM_EPS: f64 = 1e-5;

/// Gradients of one scalar with respect to every node it depends on.
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Array>>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<DiffNode>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &DiffNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Parameter leaves recorded in this graph.
    pub fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((Var(i), id)),
            _ => None,
        })
    }

    /// Batch mean and variance computed by a batch-statistics norm node.
    pub fn norm_batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::ChanNorm(c) if c.batch_stats => Some((&c.mean, &c.var)),
            _ => None,
        }
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(DiffNode { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no parameter gradient.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Input)
    }

    /// Constant copy of `v`, cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    /// Leaf reading the leading block of parameter `id` with the given extents.
    /// Gradients flow back into exactly that block.
    pub fn param(&mut self, params: &Params, id: ParamId, extents: &[usize]) -> Result<Var> {
        let value = params.value(id).leading_slice(extents)?;
        Ok(self.push(value, Op::Param(id)))
    }

    pub fn param_full(&mut self, params: &Params, id: ParamId) -> Var {
        let value = params.value(id).clone();
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim(format!(
                "matmul of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `x[B×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.rank() != 2 || bv.rank() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(Error::dim(format!(
                "add_bias of {:?} and {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let n = bv.numel();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(Array::new(xv.shape().to_vec(), out)?, Op::AddBias(x, bias)))
    }

    /// 3×3 cross-correlation, stride 1, zero same-padding.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        if xv.rank() != 4 || kv.rank() != 4 || kv.shape()[2] != 3 || kv.shape()[3] != 3 {
            return Err(Error::dim(format!(
                "conv2d expects B×C×H×W input and O×C×3×3 kernel, got {:?} and {:?}",
                xv.shape(),
                kv.shape()
            )));
        }
        if xv.shape()[1] != kv.shape()[1] {
            return Err(Error::dim(format!(
                "conv2d input has {} channels, kernel expects {}",
                xv.shape()[1],
                kv.shape()[1]
            )));
        }
        let geo = ConvGeometry::new(xv.shape(), kv.shape());
        let out = conv_forward(&geo, xv.data(), kv.data());
        let shape = vec![geo.batch, geo.cout, geo.h, geo.w];
        Ok(self.push(Array::new(shape, out)?, Op::Conv3x3(x, kernel)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// 2×2 average pooling with stride 2 over the two trailing axes.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::dim(format!("avg_pool2 expects B×C×2h×2w input, got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                    let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = 0.25 * (a + b);
                }
            }
        }
        let shape = vec![s[0], s[1], oh, ow];
        Ok(self.push(Array::new(shape, out)?, Op::AvgPool2(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Collapses every axis after the first: `B×…` to `B×rest`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let shape = vec![s[0], s[1..].iter().product()];
        self.reshape(x, shape)
    }

    /// Per-channel normalization (axis 1) with learned scale and shift.
    ///
    /// In batch mode the statistics are taken over every axis except the
    /// channel axis and are differentiated through; in fixed mode they are
    /// constants.
    pub fn chan_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormInput<'_>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::dim(format!("chan_norm needs a channel axis, got {:?}", xv.shape())));
        }
        let s = xv.shape().to_vec();
        let (batch, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::dim(format!(
                "chan_norm over {c} channels got scale {:?} and shift {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let m = (batch * inner) as f64;
        let (mean, var, batch_stats) = match stats {
            NormInput::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        mean[ch] += xv.data()[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        var[ch] += xv.data()[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var, true)
            }
            NormInput::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(format!(
                        "chan_norm over {c} channels got {} / {} statistics",
                        mean.len(),
                        var.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for k in base..base + inner {
                    let h = (xv.data()[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = gv.data()[ch] * h + bv.data()[ch];
                }
            }
        }
        let cache = ChanNormCache { x, gamma, beta, xhat, inv_std, mean, var, batch_stats };
        Ok(self.push(Array::new(s, out)?, Op::ChanNorm(Box::new(cache))))
    }

    /// Mean over axis 1, keeping the axis with extent 1.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::dim(format!(
                "channel_mean needs rank >= 2, got {:?}",
                xv.shape()
            )));
        }
        let s = xv.shape();
        let (batch, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
        let mut out = vec![0.0; batch * inner];
        for b in 0..batch {
            let dst = &mut out[b * inner..(b + 1) * inner];
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for (d, v) in dst.iter_mut().zip(&xv.data()[base..base + inner]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d /= c as f64);
        }
        let mut shape = s.to_vec();
        shape[1] = 1;
        Ok(self.push(Array::new(shape, out)?, Op::ChannelMean(x)))
    }

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{op} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a), self.value(b));
        let sse: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).powi(2)).sum();
        let value = Array::scalar(sse / av.numel() as f64);
        Ok(self.push(value, Op::Mse(a, b)))
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "l1")?;
        let (av, bv) = (self.value(a), self.value(b));
        let sad: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum();
        let value = Array::scalar(sad / av.numel() as f64);
        Ok(self.push(value, Op::L1(a, b)))
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross entropy of logits {:?} with {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let (batch, k) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} outside [0, {k})")));
        }
        let mut probs = vec![0.0; batch * k];
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv.data()[b * k..(b + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[label];
            for (p, v) in probs[b * k..(b + 1) * k].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let value = Array::scalar(total / batch as f64);
        Ok(self.push(value, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Array::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Gradients of scalar `loss` with respect to every node, computed
    /// from zero-initialized buffers.
    pub fn node_grads(&self, loss: Var) -> Result<NodeGrads> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Adds d(loss)/d(param) into each reachable parameter's gradient buffer.
    pub fn backward(&self, loss: Var, params: &mut Params) -> Result<()> {
        let grads = self.node_grads(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                params.grads[id.0].add_leading(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let bt = transpose(bv.data(), k, n);
                let da = matmul_raw(g.data(), &bt, m, n, k);
                let at = transpose(av.data(), m, k);
                let db = matmul_raw(&at, g.data(), k, m, n);
                accumulate(grads, *a, Array::new(vec![m, k], da)?);
                accumulate(grads, *b, Array::new(vec![k, n], db)?);
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).numel();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, Array::from_vec(db));
            }
            Op::Conv3x3(x, k) => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let geo = ConvGeometry::new(xv.shape(), kv.shape());
                let (dx, dk) = conv_backward(&geo, xv.data(), kv.data(), g.data());
                accumulate(grads, *x, Array::new(xv.shape().to_vec(), dx)?);
                accumulate(grads, *k, Array::new(kv.shape().to_vec(), dk)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv.data().iter().zip(g.data()).map(|(v, d)| if *v > 0.0 { *d } else { 0.0 }).collect();
                accumulate(grads, *x, Array::new(xv.shape().to_vec(), data)?);
            }
            Op::AvgPool2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for i in 0..h {
                        for j in 0..w {
                            dx[p * h * w + i * w + j] = 0.25 * g.data()[p * oh * ow + (i / 2) * ow + j / 2];
                        }
                    }
                }
                accumulate(grads, *x, Array::new(s, dx)?);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.reshape(self.value(*x).shape().to_vec())?);
            }
            Op::ChanNorm(c) => {
                let xv = self.value(c.x);
                let s = xv.shape();
                let (batch, ch_count, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
                let gamma = self.value(c.gamma).data();
                let mut dgamma = vec![0.0; ch_count];
                let mut dbeta = vec![0.0; ch_count];
                for b in 0..batch {
                    for ch in 0..ch_count {
                        let base = (b * ch_count + ch) * inner;
                        for k in base..base + inner {
                            dbeta[ch] += g.data()[k];
                            dgamma[ch] += g.data()[k] * c.xhat[k];
                        }
                    }
                }
                let m = (batch * inner) as f64;
                let mut dx = vec![0.0; xv.numel()];
                for b in 0..batch {
                    for ch in 0..ch_count {
                        let base = (b * ch_count + ch) * inner;
                        let scale = gamma[ch] * c.inv_std[ch];
                        for k in base..base + inner {
                            dx[k] = if c.batch_stats {
                                scale * (g.data()[k] - dbeta[ch] / m - c.xhat[k] * dgamma[ch] / m)
                            } else {
                                scale * g.data()[k]
                            };
                        }
                    }
                }
                accumulate(grads, c.x, Array::new(s.to_vec(), dx)?);
                accumulate(grads, c.gamma, Array::from_vec(dgamma));
                accumulate(grads, c.beta, Array::from_vec(dbeta));
            }
            Op::ChannelMean(x) => {
                let s = self.value(*x).shape().to_vec();
                let (batch, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
                let mut dx = vec![0.0; batch * c * inner];
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for k in 0..inner {
                            dx[base + k] = g.data()[b * inner + k] / c as f64;
                        }
                    }
                }
                accumulate(grads, *x, Array::new(s, dx)?);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let f = 2.0 * g.item() / av.numel() as f64;
                let da: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| f * (x - y)).collect();
                let db = da.iter().map(|v| -v).collect();
                accumulate(grads, *a, Array::new(av.shape().to_vec(), da)?);
                accumulate(grads, *b, Array::new(bv.shape().to_vec(), db)?);
            }
            Op::L1(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let f = g.item() / av.numel() as f64;
                let da: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            f
                        } else if d < 0.0 {
                            -f
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let db = da.iter().map(|v| -v).collect();
                accumulate(grads, *a, Array::new(av.shape().to_vec(), da)?);
                accumulate(grads, *b, Array::new(bv.shape().to_vec(), db)?);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let s = self.value(*logits).shape().to_vec();
                let (batch, k) = (s[0], s[1]);
                let f = g.item() / batch as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * f).collect();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * k + l] -= f;
                }
                accumulate(grads, *logits, Array::new(s, d)?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Array::filled(&shape, g.item()));
            }
            Op::Scale(x, factor) => {
                accumulate(grads, *x, g.map(|v| v * factor));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, delta: Array) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

struct ConvGeometry {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize]) -> Self {
        Self { batch: x[0], cin: x[1], cout: k[0], h: x[2], w: x[3] }
    }
}

/// Valid output range along one axis for kernel tap `d` (0..3).
fn tap_range(d: usize, len: usize) -> (usize, usize) {
    match d {
        0 => (1, len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

fn conv_forward(geo: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
    let ConvGeometry { batch, cin, cout, h, w } = *geo;
    let plane = h * w;
    let mut out = vec![0.0; batch * cout * plane];
    for b in 0..batch {
        for o in 0..cout {
            let dst = &mut out[(b * cout + o) * plane..(b * cout + o + 1) * plane];
            for c in 0..cin {
                let src = &x[(b * cin + c) * plane..(b * cin + c + 1) * plane];
                let kern = &k[(o * cin + c) * 9..(o * cin + c + 1) * 9];
                for di in 0..3 {
                    let (i0, i1) = tap_range(di, h);
                    for dj in 0..3 {
                        let kv = kern[di * 3 + dj];
                        let (j0, j1) = tap_range(dj, w);
                        for i in i0..i1 {
                            let si = (i + di - 1) * w;
                            for j in j0..j1 {
                                dst[i * w + j] += kv * src[si + j + dj - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(geo: &ConvGeometry, x: &[f64], k: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ConvGeometry { batch, cin, cout, h, w } = *geo;
    let plane = h * w;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for b in 0..batch {
        for o in 0..cout {
            let gp = &g[(b * cout + o) * plane..(b * cout + o + 1) * plane];
            for c in 0..cin {
                let xoff = (b * cin + c) * plane;
                let koff = (o * cin + c) * 9;
                for di in 0..3 {
                    let (i0, i1) = tap_range(di, h);
                    for dj in 0..3 {
                        let (j0, j1) = tap_range(dj, w);
                        let kv = k[koff + di * 3 + dj];
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let si = xoff + (i + di - 1) * w;
                            for j in j0..j1 {
                                let gv = gp[i * w + j];
                                acc += gv * x[si + j + dj - 1];
                                dx[si + j + dj - 1] += gv * kv;
                            }
                        }
                        dk[koff + di * 3 + dj] += acc;
                    }
                }
            }
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Norm-wise relative error between the analytic gradient of every
    /// parameter and its central finite difference.
    fn gradcheck(params: &mut Params, build: impl Fn(&mut Graph, &Params) -> Var) -> f64 {
        params.zero_grad();
        let mut g = Graph::new();
        let loss = build(&mut g, params);
        g.backward(loss, params).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for id in params.ids().collect::<Vec<_>>() {
            let analytic = params.grad(id).clone();
            let mut numeric = vec![0.0; analytic.numel()];
            for (k, slot) in numeric.iter_mut().enumerate() {
                let orig = params.value(id).data()[k];
                params.value_mut(id).data_mut()[k] = orig + h;
                let mut gp = Graph::new();
                let lp = build(&mut gp, params);
                let fp = gp.value(lp).item();
                params.value_mut(id).data_mut()[k] = orig - h;
                let mut gm = Graph::new();
                let lm = build(&mut gm, params);
                let fm = gm.value(lm).item();
                params.value_mut(id).data_mut()[k] = orig;
                *slot = (fp - fm) / (2.0 * h);
            }
            let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt()
                + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            if scale > 0.0 {
                worst = worst.max(diff / scale);
            }
        }
        worst
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let eye = g.input(Array::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.input(Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(p), g.value(b));

        let a = g.input(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = g.input(Array::ones(&[2, 1]));
        let p = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 7.0]);
        assert!(matches!(g.matmul(a, b).map(|_| ()), Ok(())));
        assert!(matches!(g.matmul(b, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::new();
        let a = params.add("a", random(&mut rng, &[5, 7]));
        let bval = random(&mut rng, &[7, 3]);
        let mut g = Graph::new();
        let av = g.param_full(&params, a);
        let bv = g.input(bval.clone());
        let p = g.matmul(av, bv).unwrap();
        let s = g.sum(p);
        g.backward(s, &mut params).unwrap();
        for i in 0..5 {
            for k in 0..7 {
                let expect: f64 = (0..3).map(|j| bval.data()[k * 3 + j]).sum();
                assert!((params.grad(a).data()[i * 7 + k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_zero_and_identity_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[2, 1, 5, 4]);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let zero = g.input(Array::zeros(&[3, 1, 3, 3]));
        let out = g.conv2d(xv, zero).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));

        let mut id = Array::zeros(&[1, 1, 3, 3]);
        id.data_mut()[4] = 1.0;
        let idv = g.input(id);
        let out = g.conv2d(xv, idv).unwrap();
        assert_eq!(g.value(out), &x);

        let bad = g.input(Array::zeros(&[1, 2, 3, 3]));
        assert!(matches!(g.conv2d(xv, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut params = Params::new();
        let p = params.add("x", Array::from_vec(vec![-1.0, 0.0, 2.0]));
        let mut g = Graph::new();
        let x = g.param_full(&params, p);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(r);
        g.backward(s, &mut params).unwrap();
        assert_eq!(params.grad(p).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn channel_mean_values() {
        let mut g = Graph::new();
        // B=1, C=2, two spatial cells: channel 0 = [1,5], channel 1 = [3,7]
        let x = g.input(Array::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 7.0]).unwrap());
        let m = g.channel_mean(x).unwrap();
        assert_eq!(g.value(m).shape(), &[1, 1, 2]);
        assert_eq!(g.value(m).data(), &[2.0, 6.0]);

        let single = g.input(Array::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let m = g.channel_mean(single).unwrap();
        assert_eq!(g.value(m).data(), g.value(single).data());

        let flat = g.input(Array::from_vec(vec![1.0]));
        assert!(matches!(g.channel_mean(flat), Err(Error::Dimension(_))));
    }

    #[test]
    fn loss_values() {
        let mut g = Graph::new();
        let a = g.input(Array::ones(&[4]));
        let b = g.input(Array::zeros(&[4]));
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.value(m).item(), 1.0);
        let m = g.mse(a, a).unwrap();
        assert_eq!(g.value(m).item(), 0.0);

        let a = g.input(Array::from_vec(vec![2.0]));
        let b = g.input(Array::from_vec(vec![-1.0]));
        let l = g.l1(a, b).unwrap();
        assert_eq!(g.value(l).item(), 3.0);
        let c = g.input(Array::zeros(&[2]));
        assert!(matches!(g.l1(a, c), Err(Error::Dimension(_))));
        assert!(matches!(g.mse(a, c), Err(Error::Dimension(_))));

        let logits = g.input(Array::zeros(&[2, 5]));
        let ce = g.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-12);

        let mut hot = Array::zeros(&[1, 3]);
        hot.data_mut()[1] = 1000.0;
        let hot = g.input(hot);
        let ce = g.softmax_cross_entropy(hot, &[1]).unwrap();
        assert!(g.value(ce).item().abs() < 1e-12);
        assert!(matches!(g.softmax_cross_entropy(hot, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut params = Params::new();
        let p = params.add("p", Array::ones(&[3]));
        let mut g = Graph::new();
        let x = g.param_full(&params, p);
        assert!(matches!(g.backward(x, &mut params), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates() {
        let mut params = Params::new();
        let p = params.add("p", Array::new(vec![2, 2], vec![0.3, -1.0, 2.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param_full(&params, p);
        let s = g.sum(x);
        g.backward(s, &mut params).unwrap();
        assert_eq!(params.grad(p).data(), &[1.0; 4]);
        g.backward(s, &mut params).unwrap();
        assert_eq!(params.grad(p).data(), &[2.0; 4]);
        params.zero_grad();
        assert_eq!(params.grad(p).data(), &[0.0; 4]);
    }

    #[test]
    fn sliced_param_gradient_lands_in_leading_block() {
        let mut params = Params::new();
        let p = params.add("w", Array::ones(&[3, 4]));
        let mut g = Graph::new();
        let x = g.param(&params, p, &[2, 3]).unwrap();
        let s = g.sum(x);
        g.backward(s, &mut params).unwrap();
        let expect = [1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(params.grad(p).data(), &expect);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = Params::new();
        let x = params.add("x", random(&mut rng, &[3, 2, 4, 4]));
        let k = params.add("k", random(&mut rng, &[3, 2, 3, 3]));
        let gamma = params.add("gamma", random(&mut rng, &[3]));
        let beta = params.add("beta", random(&mut rng, &[3]));
        let w = params.add("w", random(&mut rng, &[12, 4]));
        let bias = params.add("b", random(&mut rng, &[4]));
        let target = random(&mut rng, &[3, 1, 4, 4]);
        let err = gradcheck(&mut params, |g, p| {
            let xv = g.param_full(p, x);
            let kv = g.param_full(p, k);
            let c = g.conv2d(xv, kv).unwrap();
            let gv = g.param_full(p, gamma);
            let bv = g.param_full(p, beta);
            let n = g.chan_norm(c, gv, bv, NormInput::Batch).unwrap();
            let r = g.relu(n);
            let cm = g.channel_mean(r).unwrap();
            let t = g.input(target.clone());
            let kd = g.mse(cm, t).unwrap();
            let pooled = g.avg_pool2(r).unwrap();
            let flat = g.flatten(pooled).unwrap();
            let wv = g.param_full(p, w);
            let h = g.matmul(flat, wv).unwrap();
            let bb = g.param_full(p, bias);
            let logits = g.add_bias(h, bb).unwrap();
            let ce = g.softmax_cross_entropy(logits, &[0, 3, 1]).unwrap();
            let half = g.scale(kd, 0.5);
            g.add(ce, half).unwrap()
        });
        assert!(err < 1e-6, "relative error {err}");
    }
}
