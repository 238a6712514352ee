//! Position/channel attention: an N x N spatial attention map over flattened
//! positions and a C x C channel attention map, each added back to the input
//! through a learned scalar (beta, gamma) that starts at zero.

use crate::error::Result;
use crate::nn::Conv2dLayer;
use crate::tensor::{Bindings, Graph, NodeRef, Tensor};
use rand::Rng;

/// How the two attention branches combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PcamFusion {
    /// Elementwise sum of the branch outputs (the tested default).
    #[default]
    Sum,
    /// Channel attention applied to the position-attention output.
    Sequential,
}

/// One PCAM instance. Projection widths: R and S use max(C/8, 1) channels,
/// T keeps C. Channel attention has no projections.
#[derive(Debug, Clone)]
pub struct PcamBlock {
    pub name: String,
    pub proj_r: Conv2dLayer,
    pub proj_s: Conv2dLayer,
    pub proj_t: Conv2dLayer,
    /// Position-branch residual scale, initialized to exactly 0.
    pub beta: Tensor,
    /// Channel-branch residual scale, initialized to exactly 0.
    pub gamma: Tensor,
    pub fusion: PcamFusion,
    channels: usize,
}

impl PcamBlock {
    pub fn new<R: Rng>(name: &str, channels: usize, fusion: PcamFusion, rng: &mut R) -> Self {
        let reduced = (channels / 8).max(1);
        PcamBlock {
            name: name.to_string(),
            proj_r: Conv2dLayer::new(format!("{name}.proj_r"), channels, reduced, 1, 1, 0, 1, false, rng),
            proj_s: Conv2dLayer::new(format!("{name}.proj_s"), channels, reduced, 1, 1, 0, 1, false, rng),
            proj_t: Conv2dLayer::new(format!("{name}.proj_t"), channels, channels, 1, 1, 0, 1, false, rng),
            beta: Tensor::zeros(&[1]),
            gamma: Tensor::zeros(&[1]),
            fusion,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial attention: u_ji = softmax_i(R_i . S_j), out_j = beta * sum_i
    /// u_ji T_i + Q_j, reshaped back to [C,H,W].
    pub fn position_attention(&self, g: &mut Graph, q: NodeRef, b: &mut Bindings) -> Result<NodeRef> {
        let shape = g.value(q).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let n = h * w;

        let r = self.proj_r.forward(g, q, b)?;
        let r = g.reshape(r, vec![self.proj_r.out_channels(), n])?;
        let s = self.proj_s.forward(g, q, b)?;
        let s = g.reshape(s, vec![self.proj_s.out_channels(), n])?;
        let t = self.proj_t.forward(g, q, b)?;
        let t = g.reshape(t, vec![c, n])?;

        // scores[j][i] = R_i . S_j
        let st = g.transpose(s)?;
        let scores = g.matmul(st, r)?;
        let u = g.softmax_rows(scores)?;

        // out[:, j] = sum_i u[j][i] * T[:, i]  ==  T . U^T
        let ut = g.transpose(u)?;
        let agg = g.matmul(t, ut)?;

        let beta = b.bind(g, format!("{}.beta", self.name), &self.beta);
        let scaled = g.mul(agg, beta)?;
        let qf = g.reshape(q, vec![c, n])?;
        let out = g.add(scaled, qf)?;
        g.reshape(out, vec![c, h, w])
    }

    /// Channel attention: z_ji = softmax_i(Q_i . Q_j) over flattened channels,
    /// out_j = gamma * sum_i z_ji Q_i + Q_j.
    pub fn channel_attention(&self, g: &mut Graph, q: NodeRef, b: &mut Bindings) -> Result<NodeRef> {
        let shape = g.value(q).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let n = h * w;

        let qf = g.reshape(q, vec![c, n])?;
        let qt = g.transpose(qf)?;
        let scores = g.matmul(qf, qt)?;
        let z = g.softmax_rows(scores)?;
        let agg = g.matmul(z, qf)?;

        let gamma = b.bind(g, format!("{}.gamma", self.name), &self.gamma);
        let scaled = g.mul(agg, gamma)?;
        let out = g.add(scaled, qf)?;
        g.reshape(out, vec![c, h, w])
    }

    pub fn forward(&self, g: &mut Graph, x: NodeRef, b: &mut Bindings) -> Result<NodeRef> {
        match self.fusion {
            PcamFusion::Sum => {
                let p = self.position_attention(g, x, b)?;
                let c = self.channel_attention(g, x, b)?;
                g.add(p, c)
            }
            PcamFusion::Sequential => {
                let p = self.position_attention(g, x, b)?;
                self.channel_attention(g, p, b)
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.proj_r.visit_params(f);
        self.proj_s.visit_params(f);
        self.proj_t.visit_params(f);
        f(&format!("{}.beta", self.name), &mut self.beta);
        f(&format!("{}.gamma", self.name), &mut self.gamma);
    }
}
