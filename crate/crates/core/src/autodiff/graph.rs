//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once per architecture with [`GraphBuilder`]. Shapes
//! are inferred while building, so a graph that builds successfully can only
//! fail at evaluation time on bad bindings or non-finite values. Evaluation
//! keeps every intermediate value in an [`Evaluation`], which the backward
//! pass consumes.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Param(String),
    /// `[m, n] x [n]` or `[m, n] x [n, p]`.
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Adds a `[C]` bias along the leading axis of a `[C, ...]` tensor.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise maximum; ties route the gradient to the first operand.
    Maximum(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    /// Stride-1 cross-correlation of `[C, H, W]` with `[O, C, KH, KW]`.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        padding: usize,
    },
    /// Non-overlapping `k x k` mean pooling over `[C, H, W]`.
    AvgPool2d(NodeId, usize),
    LogSumExp(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Maximum(..) => "maximum",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d(..) => "avg_pool2d",
            Op::LogSumExp(_) => "logsumexp",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::Maximum(a, b) => vec![a, b],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::AvgPool2d(a, _)
            | Op::LogSumExp(a) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    label: String,
}

/// Source of leaf tensors (inputs and parameters) by name.
pub trait Feed {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Feed for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Feed for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Feed for [(&str, &Tensor)] {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
    }
}

impl<const N: usize> Feed for [(&str, &Tensor); N] {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.as_slice().lookup(name)
    }
}

impl<T: Feed + ?Sized> Feed for &T {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        (**self).lookup(name)
    }
}

/// Looks in the first feed, then the second.
impl<A: Feed, B: Feed> Feed for (A, B) {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
    leaf_names: HashSet<String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        let label = match &op {
            Op::Input(n) | Op::Param(n) => n.clone(),
            other => format!("#{id} {}", other.name()),
        };
        self.nodes.push(Node { op, shape, label });
        NodeId(id)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn fail(&self, op: &str, detail: String) -> Error {
        Error::Shape {
            node: format!("#{} {op}", self.nodes.len()),
            detail,
        }
    }

    fn leaf(&mut self, name: &str, shape: &[usize], param: bool) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(self.fail(name, format!("invalid leaf shape {shape:?}")));
        }
        if !self.leaf_names.insert(name.to_string()) {
            return Err(Error::invalid(format!("duplicate leaf name `{name}`")));
        }
        let op = if param {
            Op::Param(name.to_string())
        } else {
            Op::Input(name.to_string())
        };
        Ok(self.push(op, shape.to_vec()))
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, false)
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = match (sa.as_slice(), sb.as_slice()) {
            ([m, n], [k]) if n == k => vec![*m],
            ([m, n], [k, p]) if n == k => vec![*m, *p],
            _ => return Err(self.fail("matmul", format!("incompatible {sa:?} x {sb:?}"))),
        };
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn same_shape(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            let detail = format!("{:?} vs {:?}", self.shape(a), self.shape(b));
            return Err(self.fail(op.name(), detail));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, Op::Mul(a, b))
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, Op::Maximum(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sb[0] != sa[0] {
            return Err(self.fail("add_bias", format!("bias {sb:?} for {sa:?}")));
        }
        Ok(self.push(Op::AddBias(a, bias), sa))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, s), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a), shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log(a), shape)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Softplus(a), shape)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let from: usize = self.shape(a).iter().product();
        let to: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || from != to {
            let detail = format!("{:?} -> {shape:?}", self.shape(a));
            return Err(self.fail("reshape", detail));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSumExp(a), vec![1])
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, padding: usize) -> Result<NodeId> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let out = match (si.as_slice(), sk.as_slice()) {
            ([c, h, w], [o, kc, kh, kw]) if c == kc && h + 2 * padding >= *kh && w + 2 * padding >= *kw => {
                vec![*o, h + 2 * padding - kh + 1, w + 2 * padding - kw + 1]
            }
            _ => return Err(self.fail("conv2d", format!("input {si:?}, kernel {sk:?}, padding {padding}"))),
        };
        Ok(self.push(Op::Conv2d { input, kernel, padding }, out))
    }

    pub fn avg_pool2d(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        match s.as_slice() {
            [c, h, w] if k > 0 && h % k == 0 && w % k == 0 => {
                let out = vec![*c, h / k, w / k];
                Ok(self.push(Op::AvgPool2d(a, k), out))
            }
            _ => Err(self.fail("avg_pool2d", format!("{s:?} with window {k}"))),
        }
    }

    /// Renames a node for error messages.
    pub fn set_label(&mut self, node: NodeId, label: &str) {
        self.nodes[node.0].label = label.to_string();
    }

    /// Marks `node` as a named output.
    pub fn output(&mut self, name: &str, node: NodeId) -> Result<()> {
        if self.outputs.iter().any(|(n, _)| n == name) {
            return Err(Error::invalid(format!("duplicate output name `{name}`")));
        }
        self.outputs.push((name.to_string(), node));
        Ok(())
    }

    pub fn build(self) -> Graph {
        Graph {
            nodes: self.nodes,
            outputs: self.outputs,
        }
    }
}

/// Topologically ordered, immutable computation graph.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
}

/// All node values from one forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::UnknownOutput(name.to_string()))
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| match &n.op {
                Op::Input(s) | Op::Param(s) => s == name,
                _ => false,
            })
            .map(NodeId)
    }

    /// `(name, id, is_param)` for every leaf, in graph order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, NodeId, bool)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Input(s) => Some((s.as_str(), NodeId(i), false)),
            Op::Param(s) => Some((s.as_str(), NodeId(i), true)),
            _ => None,
        })
    }

    pub fn evaluate(&self, feed: &impl Feed) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Input(name) | Op::Param(name) => {
                    let t = feed.lookup(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::Shape {
                            node: node.label.clone(),
                            detail: format!("bound {:?}, declared {:?}", t.shape(), node.shape),
                        });
                    }
                    t.clone()
                }
                op => eval_op(op, &node.shape, &values),
            };
            if !v.all_finite() {
                return Err(Error::NonFinite {
                    node: self.nodes[i].label.clone(),
                });
            }
            values.push(v);
        }
        Ok(Evaluation { values })
    }

    /// Values of every marked output.
    pub fn forward(&self, feed: &impl Feed) -> Result<BTreeMap<String, Tensor>> {
        let eval = self.evaluate(feed)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), eval.values[id.0].clone()))
            .collect())
    }

    /// Gradient of the scalar output `seed_output` with respect to every leaf.
    /// Leaves the output does not depend on get a zero gradient.
    pub fn backward(&self, feed: &impl Feed, seed_output: &str) -> Result<BTreeMap<String, Tensor>> {
        let out = self.output_id(seed_output)?;
        if self.shape(out) != [1] {
            return Err(Error::NotScalar {
                node: seed_output.to_string(),
                shape: self.shape(out).to_vec(),
            });
        }
        let eval = self.evaluate(feed)?;
        let leaves: Vec<(String, NodeId)> = self.leaves().map(|(n, id, _)| (n.to_string(), id)).collect();
        let wrt: Vec<NodeId> = leaves.iter().map(|(_, id)| *id).collect();
        let grads = self.vjp(&eval, out, &Tensor::scalar(1.0), &wrt)?;
        Ok(leaves.into_iter().map(|(n, _)| n).zip(grads).collect())
    }

    /// Vector-Jacobian product: pulls `cotangent` at `output` back to each
    /// node in `wrt`. Work is restricted to nodes between `wrt` and `output`.
    pub fn vjp(&self, eval: &Evaluation, output: NodeId, cotangent: &Tensor, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        if cotangent.shape() != self.shape(output) {
            return Err(Error::Shape {
                node: self.nodes[output.0].label.clone(),
                detail: format!("cotangent {:?} for output {:?}", cotangent.shape(), self.shape(output)),
            });
        }
        let n = output.0 + 1;
        let mut active = vec![false; n];
        for id in wrt {
            if id.0 < n {
                active[id.0] = true;
            }
        }
        for i in 0..n {
            if !active[i] {
                active[i] = self.nodes[i].op.operands().iter().any(|o| active[o.0]);
            }
        }

        let mut cot: Vec<Option<Tensor>> = vec![None; n];
        cot[output.0] = Some(cotangent.clone());
        for i in (0..n).rev() {
            if !active[i] {
                continue;
            }
            let Some(g) = cot[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = backprop_op(&node.op, &g, &eval.values, &eval.values[i], &active);
            for (id, grad) in contributions {
                match &mut cot[id.0] {
                    Some(acc) => acc.add_scaled(&grad, 1.0),
                    slot @ None => *slot = Some(grad),
                }
            }
            // Leaves keep their cotangent for the caller.
            if matches!(node.op, Op::Input(_) | Op::Param(_)) {
                cot[i] = Some(g);
            }
        }

        let grads: Vec<Tensor> = wrt
            .iter()
            .map(|id| {
                cot.get(id.0)
                    .and_then(|c| c.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*id)))
            })
            .collect();
        for (g, id) in grads.iter().zip(wrt) {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    node: format!("gradient of {}", self.nodes[id.0].label),
                });
            }
        }
        Ok(grads)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn zip_with(a: &Tensor, b: &Tensor, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(shape, data).expect("shape checked at build time")
}

fn eval_op(op: &Op, shape: &[usize], v: &[Tensor]) -> Tensor {
    match *op {
        Op::Input(_) | Op::Param(_) => unreachable!(),
        Op::MatMul(a, b) => matmul(&v[a.0], &v[b.0], shape),
        Op::Add(a, b) => zip_with(&v[a.0], &v[b.0], shape, |x, y| x + y),
        Op::Sub(a, b) => zip_with(&v[a.0], &v[b.0], shape, |x, y| x - y),
        Op::Mul(a, b) => zip_with(&v[a.0], &v[b.0], shape, |x, y| x * y),
        Op::Maximum(a, b) => zip_with(&v[a.0], &v[b.0], shape, f64::max),
        Op::AddBias(a, b) => {
            let mut out = v[a.0].clone();
            let bias = v[b.0].data();
            let inner = out.len() / bias.len();
            for (chunk, &bv) in out.data_mut().chunks_mut(inner).zip(bias) {
                chunk.iter_mut().for_each(|x| *x += bv);
            }
            out
        }
        Op::Scale(a, s) => v[a.0].map(|x| x * s),
        Op::Exp(a) => v[a.0].map(f64::exp),
        Op::Log(a) => v[a.0].map(f64::ln),
        Op::Softplus(a) => v[a.0].map(softplus),
        Op::Reshape(a) => v[a.0].clone().reshape(shape).expect("checked"),
        Op::Sum(a) => Tensor::scalar(v[a.0].sum()),
        Op::LogSumExp(a) => Tensor::scalar(logsumexp(v[a.0].data())),
        Op::Conv2d { input, kernel, padding } => conv2d(&v[input.0], &v[kernel.0], padding, shape),
        Op::AvgPool2d(a, k) => avg_pool(&v[a.0], k, shape),
    }
}

fn matmul(a: &Tensor, b: &Tensor, shape: &[usize]) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let p = if b.shape().len() == 2 { b.shape()[1] } else { 1 };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &ad[i * n..(i + 1) * n];
        let dst = &mut out[i * p..(i + 1) * p];
        for (k, &aik) in row.iter().enumerate() {
            let src = &bd[k * p..(k + 1) * p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += aik * s;
            }
        }
    }
    Tensor::new(shape, out).expect("checked")
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
fn conv_range(out_len: usize, in_len: usize, k: usize, pad: usize) -> (usize, usize) {
    // input index = o + k - pad must lie in [0, in_len)
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

fn conv2d(x: &Tensor, w: &Tensor, pad: usize, shape: &[usize]) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (shape[1], shape[2]);
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for ic in 0..c {
            for ki in 0..kh {
                let (ylo, yhi) = conv_range(oh, h, ki, pad);
                for kj in 0..kw {
                    let wv = wdat[((oc * c + ic) * kh + ki) * kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = conv_range(ow, wd, kj, pad);
                    for oy in ylo..yhi {
                        let iy = oy + ki - pad;
                        let src = &xd[(ic * h + iy) * wd..(ic * h + iy + 1) * wd];
                        let dst = &mut out[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow];
                        for ox in xlo..xhi {
                            dst[ox] += wv * src[ox + kj - pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(shape, out).expect("checked")
}

fn avg_pool(x: &Tensor, k: usize, shape: &[usize]) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * oh + y / k) * ow + xx / k] += xd[(ch * h + y) * w + xx] * norm;
            }
        }
    }
    Tensor::new(shape, out).expect("checked")
}

fn backprop_op(op: &Op, g: &Tensor, v: &[Tensor], out: &Tensor, active: &[bool]) -> Vec<(NodeId, Tensor)> {
    let want = |id: NodeId| active[id.0];
    let mut res = Vec::with_capacity(2);
    match *op {
        Op::Input(_) | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&v[a.0], &v[b.0]);
            let (m, n) = (av.shape()[0], av.shape()[1]);
            let p = if bv.shape().len() == 2 { bv.shape()[1] } else { 1 };
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            if want(a) {
                // dA = G B^T
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let grow = &gd[i * p..(i + 1) * p];
                    for k in 0..n {
                        let brow = &bd[k * p..(k + 1) * p];
                        ga[i * n + k] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                res.push((a, Tensor::new(av.shape(), ga).expect("shape")));
            }
            if want(b) {
                // dB = A^T G
                let mut gb = vec![0.0; n * p];
                for i in 0..m {
                    let grow = &gd[i * p..(i + 1) * p];
                    for k in 0..n {
                        let aik = ad[i * n + k];
                        let dst = &mut gb[k * p..(k + 1) * p];
                        for (d, &x) in dst.iter_mut().zip(grow) {
                            *d += aik * x;
                        }
                    }
                }
                res.push((b, Tensor::new(bv.shape(), gb).expect("shape")));
            }
        }
        Op::Add(a, b) => {
            if want(a) {
                res.push((a, g.clone()));
            }
            if want(b) {
                res.push((b, g.clone()));
            }
        }
        Op::Sub(a, b) => {
            if want(a) {
                res.push((a, g.clone()));
            }
            if want(b) {
                res.push((b, g.map(|x| -x)));
            }
        }
        Op::Mul(a, b) => {
            if want(a) {
                res.push((a, zip_with(g, &v[b.0], g.shape(), |x, y| x * y)));
            }
            if want(b) {
                res.push((b, zip_with(g, &v[a.0], g.shape(), |x, y| x * y)));
            }
        }
        Op::Maximum(a, b) => {
            let (av, bv) = (v[a.0].data(), v[b.0].data());
            if want(a) {
                let d = g
                    .data()
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&gi, (x, y))| if x >= y { gi } else { 0.0 });
                res.push((a, Tensor::new(g.shape(), d.collect()).expect("shape")));
            }
            if want(b) {
                let d = g
                    .data()
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&gi, (x, y))| if x >= y { 0.0 } else { gi });
                res.push((b, Tensor::new(g.shape(), d.collect()).expect("shape")));
            }
        }
        Op::AddBias(a, b) => {
            if want(a) {
                res.push((a, g.clone()));
            }
            if want(b) {
                let c = v[b.0].len();
                let inner = g.len() / c;
                let d: Vec<f64> = g.data().chunks(inner).map(|ch| ch.iter().sum()).collect();
                res.push((b, Tensor::new(v[b.0].shape(), d).expect("shape")));
            }
        }
        Op::Scale(a, s) => {
            if want(a) {
                res.push((a, g.map(|x| x * s)));
            }
        }
        Op::Exp(a) => {
            if want(a) {
                res.push((a, zip_with(g, out, g.shape(), |x, y| x * y)));
            }
        }
        Op::Log(a) => {
            if want(a) {
                res.push((a, zip_with(g, &v[a.0], g.shape(), |x, y| x / y)));
            }
        }
        Op::Softplus(a) => {
            if want(a) {
                res.push((a, zip_with(g, &v[a.0], g.shape(), |x, y| x * sigmoid(y))));
            }
        }
        Op::Reshape(a) => {
            if want(a) {
                res.push((a, g.clone().reshape(v[a.0].shape()).expect("shape")));
            }
        }
        Op::Sum(a) => {
            if want(a) {
                res.push((a, Tensor::full(v[a.0].shape(), g.item())));
            }
        }
        Op::LogSumExp(a) => {
            if want(a) {
                let lse = out.item();
                let gi = g.item();
                res.push((a, v[a.0].map(|x| gi * (x - lse).exp())));
            }
        }
        Op::Conv2d { input, kernel, padding } => {
            let (x, w) = (&v[input.0], &v[kernel.0]);
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            let (oh, ow) = (g.shape()[1], g.shape()[2]);
            let (xd, wdat, gd) = (x.data(), w.data(), g.data());
            let (need_x, need_w) = (want(input), want(kernel));
            let mut gx = vec![0.0; if need_x { xd.len() } else { 0 }];
            let mut gw = vec![0.0; if need_w { wdat.len() } else { 0 }];
            for oc in 0..o {
                for ic in 0..c {
                    for ki in 0..kh {
                        let (ylo, yhi) = conv_range(oh, h, ki, padding);
                        for kj in 0..kw {
                            let widx = ((oc * c + ic) * kh + ki) * kw + kj;
                            let wv = wdat[widx];
                            let (xlo, xhi) = conv_range(ow, wd, kj, padding);
                            let mut acc = 0.0;
                            for oy in ylo..yhi {
                                let iy = oy + ki - padding;
                                let grow = &gd[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow];
                                let base = (ic * h + iy) * wd;
                                for ox in xlo..xhi {
                                    let ix = base + ox + kj - padding;
                                    if need_x {
                                        gx[ix] += wv * grow[ox];
                                    }
                                    acc += grow[ox] * xd[ix];
                                }
                            }
                            if need_w {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
            if need_x {
                res.push((input, Tensor::new(x.shape(), gx).expect("shape")));
            }
            if need_w {
                res.push((kernel, Tensor::new(w.shape(), gw).expect("shape")));
            }
        }
        Op::AvgPool2d(a, k) => {
            if want(a) {
                let x = &v[a.0];
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let gd = g.data();
                let mut gx = vec![0.0; x.len()];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(ch * h + y) * w + xx] = gd[(ch * oh + y / k) * ow + xx / k] * norm;
                        }
                    }
                }
                res.push((a, Tensor::new(x.shape(), gx).expect("shape")));
            }
        }
    }
    res
}
