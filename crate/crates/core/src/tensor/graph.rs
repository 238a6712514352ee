//! Recording tape for reverse-mode differentiation.
//!
//! Every forward op appends one node holding its output [`Tensor`]; operands
//! always precede their consumers, so one reverse sweep visits each node
//! exactly once. Gradient accumulation order is fixed by node index, which
//! makes repeated backward passes bit-identical.

use std::rc::Rc;

use super::conv::{self, ConvDims, PoolDims};
use super::Tensor;
use crate::error::{CoreError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(pub(crate) usize);

/// Hook for ops with hand-written backward rules (the detection loss).
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient buffer per input, each matching that input's length.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, gout: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    /// rhs is `[C]`, lhs is `[C,H,W]`: expand per channel.
    RhsChannel,
    /// rhs is `[1]`: expand to every element.
    RhsScalar,
    /// lhs is `[1]`: expand to every element (commutative ops only).
    LhsScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Broadcast),
    Sub(Broadcast),
    Mul(Broadcast),
    Silu,
    LeakyRelu(f64),
    Sigmoid,
    MatMul,
    SoftmaxRows,
    Transpose,
    Reshape,
    Conv2d { dims: ConvDims, has_bias: bool },
    MaxPool { argmax: Vec<usize> },
    Upsample { factor: usize },
    ConcatChannels,
    BatchNorm { eps: f64, stats: BnStats },
    Sum,
    Custom(Rc<dyn CustomOp>),
}

/// Per-channel statistics a batchnorm node normalized with.
#[derive(Debug, Clone)]
pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Batch stats are differentiated through; running stats are constants.
    pub from_batch: bool,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeRef>,
    value: Tensor,
    /// Whether any gradient flows into or through this node.
    requires: bool,
}

/// The recording tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeRef) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn grad(&self, n: NodeRef) -> Option<&[f64]> {
        self.nodes[n.0].value.grad.as_deref()
    }

    /// Batch statistics recorded by a training-mode batchnorm node.
    pub fn batch_stats(&self, n: NodeRef) -> Option<(&[f64], &[f64])> {
        match &self.nodes[n.0].op {
            Op::BatchNorm { stats, .. } if stats.from_batch => Some((&stats.mean, &stats.var)),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeRef>, value: Tensor) -> NodeRef {
        let requires = value.requires_grad
            || inputs.iter().any(|r| self.nodes[r.0].requires);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires,
        });
        NodeRef(self.nodes.len() - 1)
    }

    /// Register a tensor as a graph input. Its `requires_grad` flag decides
    /// whether backward accumulates a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeRef {
        let requires = t.requires_grad;
        let mut t = t;
        t.grad = None;
        let r = self.push(Op::Leaf, vec![], t);
        self.nodes[r.0].requires = requires;
        r
    }

    pub fn constant(&mut self, mut t: Tensor) -> NodeRef {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: f64) -> NodeRef {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise -------------------------------------------------------

    fn broadcast_of(&self, op: &'static str, a: NodeRef, b: NodeRef, commutative: bool) -> Result<Broadcast> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if sb == [1] {
            return Ok(Broadcast::RhsScalar);
        }
        if commutative && sa == [1] {
            return Ok(Broadcast::LhsScalar);
        }
        if sa.len() == 3 && sb.len() == 1 && sb[0] == sa[0] {
            return Ok(Broadcast::RhsChannel);
        }
        Err(CoreError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn elementwise_binary(
        &mut self,
        a: NodeRef,
        b: NodeRef,
        bc: Broadcast,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        match bc {
            Broadcast::Same => {
                let vals = av
                    .values()
                    .iter()
                    .zip(bv.values())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Tensor::new(av.shape().to_vec(), vals).expect("same-shape elementwise")
            }
            Broadcast::RhsScalar => {
                let s = bv.values()[0];
                let vals = av.values().iter().map(|&x| f(x, s)).collect();
                Tensor::new(av.shape().to_vec(), vals).expect("scalar broadcast")
            }
            Broadcast::LhsScalar => {
                let s = av.values()[0];
                let vals = bv.values().iter().map(|&y| f(s, y)).collect();
                Tensor::new(bv.shape().to_vec(), vals).expect("scalar broadcast")
            }
            Broadcast::RhsChannel => {
                let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let mut vals = Vec::with_capacity(c * h * w);
                for ci in 0..c {
                    let bias = bv.values()[ci];
                    vals.extend(
                        av.values()[ci * h * w..(ci + 1) * h * w]
                            .iter()
                            .map(|&x| f(x, bias)),
                    );
                }
                Tensor::new(av.shape().to_vec(), vals).expect("channel broadcast")
            }
        }
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let bc = self.broadcast_of("add", a, b, true)?;
        let out = self.elementwise_binary(a, b, bc, |x, y| x + y);
        Ok(self.push(Op::Add(bc), vec![a, b], out))
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let bc = self.broadcast_of("sub", a, b, false)?;
        let out = self.elementwise_binary(a, b, bc, |x, y| x - y);
        Ok(self.push(Op::Sub(bc), vec![a, b], out))
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let bc = self.broadcast_of("mul", a, b, true)?;
        let out = self.elementwise_binary(a, b, bc, |x, y| x * y);
        Ok(self.push(Op::Mul(bc), vec![a, b], out))
    }

    pub fn silu(&mut self, a: NodeRef) -> NodeRef {
        let vals = self.nodes[a.0]
            .value
            .values()
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let out = Tensor::new(self.nodes[a.0].value.shape().to_vec(), vals).expect("silu");
        self.push(Op::Silu, vec![a], out)
    }

    pub fn leaky_relu(&mut self, a: NodeRef, slope: f64) -> NodeRef {
        let vals = self.nodes[a.0]
            .value
            .values()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let out = Tensor::new(self.nodes[a.0].value.shape().to_vec(), vals).expect("leaky_relu");
        self.push(Op::LeakyRelu(slope), vec![a], out)
    }

    pub fn sigmoid(&mut self, a: NodeRef) -> NodeRef {
        let vals = self.nodes[a.0]
            .value
            .values()
            .iter()
            .map(|&x| sigmoid(x))
            .collect();
        let out = Tensor::new(self.nodes[a.0].value.shape().to_vec(), vals).expect("sigmoid");
        self.push(Op::Sigmoid, vec![a], out)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.nodes[a.0].value.values();
        let bv = self.nodes[b.0].value.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..p * n + n];
                let orow = &mut out[i * n..i * n + n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul, vec![a, b], t))
    }

    pub fn softmax_rows(&mut self, a: NodeRef) -> Result<NodeRef> {
        let v = &self.nodes[a.0].value;
        if v.rank() != 2 {
            return Err(CoreError::InvalidShape(format!(
                "softmax_rows wants [R,C], got {:?}",
                v.shape()
            )));
        }
        if !v.is_finite() {
            return Err(CoreError::NonFinite("softmax_rows"));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v.values()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::SoftmaxRows, vec![a], t))
    }

    pub fn transpose(&mut self, a: NodeRef) -> Result<NodeRef> {
        let v = &self.nodes[a.0].value;
        if v.rank() != 2 {
            return Err(CoreError::InvalidShape(format!(
                "transpose wants rank 2, got {:?}",
                v.shape()
            )));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let t = Tensor::new(vec![c, r], transpose2(v.values(), r, c))?;
        Ok(self.push(Op::Transpose, vec![a], t))
    }

    pub fn reshape(&mut self, a: NodeRef, shape: Vec<usize>) -> Result<NodeRef> {
        let t = self.nodes[a.0].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![a], t))
    }

    pub fn sum(&mut self, a: NodeRef) -> NodeRef {
        let s: f64 = self.nodes[a.0].value.values().iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s))
    }

    // ---- spatial -----------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeRef,
        w: NodeRef,
        bias: Option<NodeRef>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<NodeRef> {
        let dims = ConvDims::resolve(
            self.nodes[x.0].value.shape(),
            self.nodes[w.0].value.shape(),
            stride,
            padding,
            dilation,
        )?;
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [dims.cout] {
                return Err(CoreError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![dims.cout],
                    rhs: bs.to_vec(),
                });
            }
        }
        let out = conv::conv2d_forward(
            self.nodes[x.0].value.values(),
            self.nodes[w.0].value.values(),
            bias.map(|b| self.nodes[b.0].value.values()),
            &dims,
        );
        let t = Tensor::new(vec![dims.cout, dims.ho, dims.wo], out)?;
        let mut inputs = vec![x, w];
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push(Op::Conv2d { dims, has_bias }, inputs, t))
    }

    pub fn maxpool2d(&mut self, x: NodeRef, kernel: usize, stride: usize, padding: usize) -> Result<NodeRef> {
        let dims = PoolDims::resolve(self.nodes[x.0].value.shape(), kernel, stride, padding)?;
        let (out, argmax) = conv::maxpool2d_forward(self.nodes[x.0].value.values(), &dims);
        let t = Tensor::new(vec![dims.c, dims.ho, dims.wo], out)?;
        Ok(self.push(Op::MaxPool { argmax }, vec![x], t))
    }

    pub fn upsample_nearest(&mut self, x: NodeRef, factor: usize) -> Result<NodeRef> {
        if factor == 0 {
            return Err(CoreError::InvalidArgument(
                "upsample_nearest: factor must be >= 1".into(),
            ));
        }
        let v = &self.nodes[x.0].value;
        if v.rank() != 3 {
            return Err(CoreError::InvalidShape(format!(
                "upsample_nearest wants [C,H,W], got {:?}",
                v.shape()
            )));
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let out = conv::upsample_forward(v.values(), c, h, w, factor);
        let t = Tensor::new(vec![c, h * factor, w * factor], out)?;
        Ok(self.push(Op::Upsample { factor }, vec![x], t))
    }

    pub fn concat_channels(&mut self, xs: &[NodeRef]) -> Result<NodeRef> {
        if xs.is_empty() {
            return Err(CoreError::InvalidArgument("concat_channels: no inputs".into()));
        }
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        if first.len() != 3 {
            return Err(CoreError::InvalidShape(format!(
                "concat_channels wants [C,H,W], got {first:?}"
            )));
        }
        let (h, w) = (first[1], first[2]);
        let mut c_total = 0;
        for r in xs {
            let s = self.nodes[r.0].value.shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            c_total += s[0];
        }
        let mut vals = Vec::with_capacity(c_total * h * w);
        for r in xs {
            vals.extend_from_slice(self.nodes[r.0].value.values());
        }
        let t = Tensor::new(vec![c_total, h, w], vals)?;
        Ok(self.push(Op::ConcatChannels, xs.to_vec(), t))
    }

    /// Batchnorm over a `[C,H,W]` tensor. `running = None` normalizes with
    /// the input's own per-channel statistics (training mode) and records
    /// them for the running-average update; `running = Some` uses the given
    /// statistics as constants (inference mode).
    pub fn batchnorm2d(
        &mut self,
        x: NodeRef,
        gamma: NodeRef,
        beta: NodeRef,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<NodeRef> {
        let v = &self.nodes[x.0].value;
        if v.rank() != 3 {
            return Err(CoreError::InvalidShape(format!(
                "batchnorm2d wants [C,H,W], got {:?}",
                v.shape()
            )));
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        for p in [gamma, beta] {
            let s = self.nodes[p.0].value.shape();
            if s != [c] {
                return Err(CoreError::ShapeMismatch {
                    op: "batchnorm2d affine",
                    lhs: vec![c],
                    rhs: s.to_vec(),
                });
            }
        }
        let n = h * w;
        let stats = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(CoreError::InvalidArgument(format!(
                        "batchnorm2d: running stats length {} != {c} channels",
                        rm.len()
                    )));
                }
                BnStats {
                    mean: rm.to_vec(),
                    var: rv.to_vec(),
                    from_batch: false,
                }
            }
            None => {
                let xv = v.values();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let plane = &xv[ci * n..(ci + 1) * n];
                    let m = plane.iter().sum::<f64>() / n as f64;
                    let v2 = plane.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n as f64;
                    mean[ci] = m;
                    var[ci] = v2;
                }
                BnStats {
                    mean,
                    var,
                    from_batch: true,
                }
            }
        };
        let xv = v.values();
        let gv = self.nodes[gamma.0].value.values();
        let bv = self.nodes[beta.0].value.values();
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            let inv = 1.0 / (stats.var[ci] + eps).sqrt();
            let (m, g, b) = (stats.mean[ci], gv[ci], bv[ci]);
            for (o, &x) in out[ci * n..(ci + 1) * n].iter_mut().zip(&xv[ci * n..(ci + 1) * n]) {
                *o = g * (x - m) * inv + b;
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(Op::BatchNorm { eps, stats }, vec![x, gamma, beta], t))
    }

    pub fn apply_custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[NodeRef]) -> Result<NodeRef> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|r| &self.nodes[r.0].value).collect();
        let out = op.forward(&tensors)?;
        Ok(self.push(Op::Custom(op), inputs.to_vec(), out))
    }

    // ---- backward ----------------------------------------------------------

    fn accumulate(&mut self, target: NodeRef, grad: &[f64]) {
        let node = &mut self.nodes[target.0];
        if !node.requires {
            return;
        }
        match &mut node.value.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => node.value.grad = Some(grad.to_vec()),
        }
    }

    /// Reverse sweep from a scalar output. Gradients land on every node with
    /// `requires`; leaves keep theirs for the caller to read.
    pub fn backward(&mut self, out: NodeRef) -> Result<()> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[out.0].value.shape()
            )));
        }
        self.nodes[out.0].value.grad = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let gout = match self.nodes[i].value.grad {
                Some(_) if matches!(self.nodes[i].op, Op::Leaf) => continue,
                Some(_) => self.nodes[i].value.grad.take().expect("grad present"),
                None => continue,
            };
            self.step_backward(i, &gout);
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize, gout: &[f64]) {
        let inputs = self.nodes[i].inputs.clone();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(bc) => {
                let bc = *bc;
                let ga = self.reduce_to(gout, i, inputs[0], bc, false);
                self.accumulate(inputs[0], &ga);
                let gb = self.reduce_to(gout, i, inputs[1], bc, true);
                self.accumulate(inputs[1], &gb);
            }
            Op::Sub(bc) => {
                let bc = *bc;
                let ga = self.reduce_to(gout, i, inputs[0], bc, false);
                self.accumulate(inputs[0], &ga);
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                let gb = self.reduce_to(&neg, i, inputs[1], bc, true);
                self.accumulate(inputs[1], &gb);
            }
            Op::Mul(bc) => {
                let bc = *bc;
                let (a, b) = (inputs[0], inputs[1]);
                let ga_full = self.mul_grad(gout, i, b, bc, true);
                let ga = self.reduce_to(&ga_full, i, a, bc, false);
                self.accumulate(a, &ga);
                let gb_full = self.mul_grad(gout, i, a, bc, false);
                let gb = self.reduce_to(&gb_full, i, b, bc, true);
                self.accumulate(b, &gb);
            }
            Op::Silu => {
                let x = self.nodes[inputs[0].0].value.values();
                let g: Vec<f64> = gout
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(inputs[0], &g);
            }
            Op::LeakyRelu(slope) => {
                let slope = *slope;
                let x = self.nodes[inputs[0].0].value.values();
                let g: Vec<f64> = gout
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(inputs[0], &g);
            }
            Op::Sigmoid => {
                let y = self.nodes[i].value.values();
                let g: Vec<f64> = gout.iter().zip(y).map(|(g, &y)| g * y * (1.0 - y)).collect();
                self.accumulate(inputs[0], &g);
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                let av = self.nodes[a.0].value.values();
                let bv = self.nodes[b.0].value.values();
                // ga = g . b^T
                let mut ga = vec![0.0; m * k];
                for ii in 0..m {
                    for kk in 0..k {
                        let mut acc = 0.0;
                        for jj in 0..n {
                            acc += gout[ii * n + jj] * bv[kk * n + jj];
                        }
                        ga[ii * k + kk] = acc;
                    }
                }
                // gb = a^T . g
                let mut gb = vec![0.0; k * n];
                for ii in 0..m {
                    for kk in 0..k {
                        let x = av[ii * k + kk];
                        let grow = &gout[ii * n..ii * n + n];
                        let brow = &mut gb[kk * n..kk * n + n];
                        for (o, g) in brow.iter_mut().zip(grow) {
                            *o += x * g;
                        }
                    }
                }
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::SoftmaxRows => {
                let y = self.nodes[i].value.values();
                let (r, c) = {
                    let s = self.nodes[i].value.shape();
                    (s[0], s[1])
                };
                let mut g = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &gout[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(&y, &g)| y * g).sum();
                    for j in 0..c {
                        g[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(inputs[0], &g);
            }
            Op::Transpose => {
                let (r, c) = {
                    let s = self.nodes[i].value.shape();
                    (s[0], s[1])
                };
                let g = transpose2(gout, r, c);
                self.accumulate(inputs[0], &g);
            }
            Op::Reshape | Op::Sum => {
                let g: Vec<f64> = if matches!(self.nodes[i].op, Op::Sum) {
                    vec![gout[0]; self.nodes[inputs[0].0].value.len()]
                } else {
                    gout.to_vec()
                };
                self.accumulate(inputs[0], &g);
            }
            Op::Conv2d { dims, has_bias } => {
                let dims = *dims;
                let has_bias = *has_bias;
                let x = self.nodes[inputs[0].0].value.values();
                let w = self.nodes[inputs[1].0].value.values();
                let (gx, gw, gb) = conv::conv2d_backward(x, w, gout, &dims, has_bias);
                self.accumulate(inputs[0], &gx);
                self.accumulate(inputs[1], &gw);
                if let Some(gb) = gb {
                    self.accumulate(inputs[2], &gb);
                }
            }
            Op::MaxPool { argmax, .. } => {
                let gx =
                    conv::maxpool2d_backward(gout, argmax, self.nodes[inputs[0].0].value.len());
                self.accumulate(inputs[0], &gx);
            }
            Op::Upsample { factor } => {
                let f = *factor;
                let s = self.nodes[inputs[0].0].value.shape().to_vec();
                let gx = conv::upsample_backward(gout, s[0], s[1], s[2], f);
                self.accumulate(inputs[0], &gx);
            }
            Op::ConcatChannels => {
                let mut offset = 0;
                for r in inputs {
                    let len = self.nodes[r.0].value.len();
                    let g = gout[offset..offset + len].to_vec();
                    offset += len;
                    self.accumulate(r, &g);
                }
            }
            Op::BatchNorm { eps, stats } => {
                let eps = *eps;
                let stats = stats.clone();
                let (c, n) = {
                    let s = self.nodes[i].value.shape();
                    (s[0], s[1] * s[2])
                };
                let xv = self.nodes[inputs[0].0].value.values();
                let gv = self.nodes[inputs[1].0].value.values();
                let mut gx = vec![0.0; c * n];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ci in 0..c {
                    let inv = 1.0 / (stats.var[ci] + eps).sqrt();
                    let m = stats.mean[ci];
                    let xs = &xv[ci * n..(ci + 1) * n];
                    let gs = &gout[ci * n..(ci + 1) * n];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (&g, &x) in gs.iter().zip(xs) {
                        sum_g += g;
                        sum_gx += g * (x - m) * inv;
                    }
                    ggamma[ci] = sum_gx;
                    gbeta[ci] = sum_g;
                    let gamma = gv[ci];
                    let gxs = &mut gx[ci * n..(ci + 1) * n];
                    if stats.from_batch {
                        let nf = n as f64;
                        for ((o, &g), &x) in gxs.iter_mut().zip(gs).zip(xs) {
                            let xh = (x - m) * inv;
                            *o = gamma * inv * (g - sum_g / nf - xh * sum_gx / nf);
                        }
                    } else {
                        for (o, &g) in gxs.iter_mut().zip(gs) {
                            *o = gamma * inv * g;
                        }
                    }
                }
                self.accumulate(inputs[0], &gx);
                self.accumulate(inputs[1], &ggamma);
                self.accumulate(inputs[2], &gbeta);
            }
            Op::Custom(op) => {
                let op = Rc::clone(op);
                let tensors: Vec<&Tensor> = inputs.iter().map(|r| &self.nodes[r.0].value).collect();
                let grads = op.backward(&tensors, &self.nodes[i].value, gout);
                debug_assert_eq!(grads.len(), inputs.len());
                for (r, g) in inputs.iter().zip(grads) {
                    self.accumulate(*r, &g);
                }
            }
        }
    }

    /// Reduce an output-shaped gradient onto one operand of a broadcast op.
    fn reduce_to(&self, g: &[f64], out: usize, target: NodeRef, bc: Broadcast, is_rhs: bool) -> Vec<f64> {
        let tlen = self.nodes[target.0].value.len();
        if g.len() == tlen {
            return g.to_vec();
        }
        match (bc, is_rhs) {
            (Broadcast::RhsScalar, true) | (Broadcast::LhsScalar, false) => {
                vec![g.iter().sum()]
            }
            (Broadcast::RhsChannel, true) => {
                let s = self.nodes[out].value.shape();
                let (c, n) = (s[0], s[1] * s[2]);
                (0..c).map(|ci| g[ci * n..(ci + 1) * n].iter().sum()).collect()
            }
            _ => unreachable!("broadcast {bc:?} cannot shrink the other operand"),
        }
    }

    /// For mul: grad wrt one operand is gout times the *other* operand,
    /// expanded to the output shape.
    fn mul_grad(&self, gout: &[f64], out: usize, other: NodeRef, bc: Broadcast, other_is_rhs: bool) -> Vec<f64> {
        let ov = self.nodes[other.0].value.values();
        if ov.len() == gout.len() {
            return gout.iter().zip(ov).map(|(g, &o)| g * o).collect();
        }
        match (bc, other_is_rhs) {
            (Broadcast::RhsScalar, true) | (Broadcast::LhsScalar, false) => {
                let s = ov[0];
                gout.iter().map(|g| g * s).collect()
            }
            (Broadcast::RhsChannel, true) => {
                let s = self.nodes[out].value.shape();
                let (c, n) = (s[0], s[1] * s[2]);
                let mut r = Vec::with_capacity(gout.len());
                for ci in 0..c {
                    let o = ov[ci];
                    r.extend(gout[ci * n..(ci + 1) * n].iter().map(|g| g * o));
                }
                r
            }
            _ => unreachable!(),
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose2(v: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = v[i * c + j];
        }
    }
    out
}

/// Records which tape node each named parameter was bound to during one
/// forward pass, so gradients and batchnorm statistics can be pulled out
/// after backward. A bindings object may also carry per-name value
/// overrides, which is how the gradient checker perturbs parameters without
/// touching the blocks that own them.
#[derive(Debug, Default)]
pub struct Bindings {
    params: Vec<(String, NodeRef)>,
    bn_nodes: Vec<(String, NodeRef)>,
    overrides: std::collections::BTreeMap<String, Vec<f64>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_overrides(overrides: std::collections::BTreeMap<String, Vec<f64>>) -> Self {
        Bindings {
            overrides,
            ..Self::default()
        }
    }

    /// Register a trainable tensor as a graph leaf, taking values from the
    /// override table when one is present for this name.
    pub fn bind(&mut self, g: &mut Graph, name: impl Into<String>, t: &Tensor) -> NodeRef {
        let name = name.into();
        let mut leaf = match self.overrides.get(&name) {
            Some(values) => {
                assert_eq!(values.len(), t.len(), "override length for {name}");
                Tensor::new(t.shape().to_vec(), values.clone()).expect("override tensor")
            }
            None => t.clone(),
        };
        leaf.requires_grad = true;
        let r = g.leaf(leaf);
        self.params.push((name, r));
        r
    }

    pub fn record_bn(&mut self, name: impl Into<String>, node: NodeRef) {
        self.bn_nodes.push((name.into(), node));
    }

    pub fn params(&self) -> &[(String, NodeRef)] {
        &self.params
    }

    pub fn bn_nodes(&self) -> &[(String, NodeRef)] {
        &self.bn_nodes
    }

    /// Clone out the gradient of every bound parameter (zeros when the
    /// parameter did not participate).
    pub fn grads(&self, g: &Graph) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(name, r)| {
                let grad = g
                    .grad(*r)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(*r).len()]);
                (name.clone(), grad)
            })
            .collect()
    }
}
