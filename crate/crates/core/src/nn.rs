//! Composite layers: CBS (conv-batchnorm-SiLU) and SPP (spatial pyramid
//! pooling), plus the parameter-holding conv/batchnorm building blocks they
//! and the rest of the network are assembled from.

use crate::error::{CoreError, Result};
use crate::tensor::{Bindings, Graph, NodeRef, Tensor};
use rand::Rng;

/// Forward-pass mode: training normalizes with batch statistics, inference
/// with running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// The activation behind sigma in the composite blocks. SiLU everywhere by
/// default; leaky ReLU is the retained alternative and the right choice on
/// prediction maps, where a bounded-below activation would cap how negative
/// an objectness logit can go.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Silu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(&self, g: &mut Graph, x: NodeRef) -> NodeRef {
        match *self {
            Activation::Silu => g.silu(x),
            Activation::LeakyRelu(slope) => g.leaky_relu(x, slope),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::LeakyRelu(_) => "leaky_relu",
        }
    }
}

/// A conv layer's parameters. The op itself lives on the graph.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Conv2dLayer {
            name: name.into(),
            weight: Tensor::randn(&[cout, cin, k, k], std, rng),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            stride,
            padding,
            dilation,
        }
    }

    /// Same, but with an explicit weight std (prediction heads start small).
    #[allow(clippy::too_many_arguments)]
    pub fn with_std<R: Rng>(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Conv2dLayer {
            name: name.into(),
            weight: Tensor::randn(&[cout, cin, k, k], std, rng),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            stride,
            padding,
            dilation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, g: &mut Graph, x: NodeRef, b: &mut Bindings) -> Result<NodeRef> {
        let w = b.bind(g, format!("{}.weight", self.name), &self.weight);
        let bias = self
            .bias
            .as_ref()
            .map(|t| b.bind(g, format!("{}.bias", self.name), t));
        g.conv2d(x, w, bias, self.stride, self.padding, self.dilation)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        if let Some(bias) = self.bias.as_mut() {
            f(&format!("{}.bias", self.name), bias);
        }
    }
}

/// Per-channel batchnorm state. Running statistics update with momentum 0.1.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeRef, b: &mut Bindings, mode: Mode) -> Result<NodeRef> {
        let gamma = b.bind(g, format!("{}.gamma", self.name), &self.gamma);
        let beta = b.bind(g, format!("{}.beta", self.name), &self.beta);
        let node = match mode {
            Mode::Train => g.batchnorm2d(x, gamma, beta, None, self.eps)?,
            Mode::Infer => g.batchnorm2d(
                x,
                gamma,
                beta,
                Some((&self.running_mean, &self.running_var)),
                self.eps,
            )?,
        };
        if mode == Mode::Train {
            b.record_bn(self.name.clone(), node);
        }
        Ok(node)
    }

    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &v) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        // floor keeps the inference-mode gain 1/sqrt(var+eps) bounded for
        // channels whose per-sample variance collapses
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = ((1.0 - m) * *r + m * v).max(1e-4);
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }
}

/// Conv -> batchnorm -> SiLU.
#[derive(Debug, Clone)]
pub struct CbsBlock {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2d,
}

impl CbsBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        CbsBlock {
            conv: Conv2dLayer::new(format!("{name}.conv"), cin, cout, k, stride, padding, 1, true, rng),
            bn: BatchNorm2d::new(format!("{name}.bn"), cout),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, g: &mut Graph, x: NodeRef, b: &mut Bindings, mode: Mode) -> Result<NodeRef> {
        let y = self.conv.forward(g, x, b)?;
        let y = self.bn.forward(g, y, b, mode)?;
        Ok(g.silu(y))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    pub fn visit_bns(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        f(&mut self.bn);
    }
}

/// Spatial pyramid pooling: entry CBS, three parallel same-size max pools,
/// channel concat, exit CBS. Spatial size is preserved end to end.
#[derive(Debug, Clone)]
pub struct SppBlock {
    pub entry: CbsBlock,
    pub pools: [usize; 3],
    pub exit: CbsBlock,
}

impl SppBlock {
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        pools: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        for k in pools {
            if k % 2 == 0 {
                return Err(CoreError::InvalidArgument(format!(
                    "spp pool kernels must be odd for same-padding, got {k}"
                )));
            }
        }
        let mid = (cin / 2).max(1);
        Ok(SppBlock {
            entry: CbsBlock::new(&format!("{name}.entry"), cin, mid, 1, 1, 0, rng),
            pools,
            exit: CbsBlock::new(&format!("{name}.exit"), mid * 4, cout, 1, 1, 0, rng),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.exit.out_channels()
    }

    pub fn forward(&self, g: &mut Graph, x: NodeRef, b: &mut Bindings, mode: Mode) -> Result<NodeRef> {
        let e = self.entry.forward(g, x, b, mode)?;
        let mut branches = vec![e];
        for k in self.pools {
            branches.push(g.maxpool2d(e, k, 1, (k - 1) / 2)?);
        }
        let cat = g.concat_channels(&branches)?;
        self.exit.forward(g, cat, b, mode)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.entry.visit_params(f);
        self.exit.visit_params(f);
    }

    pub fn visit_bns(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        self.entry.visit_bns(f);
        self.exit.visit_bns(f);
    }
}
