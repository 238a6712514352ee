//! Extended receptive domain block: parallel 3x3 dilated convolutions plus
//! 1x1 and identity branches, fused by summation under one activation.

use crate::error::{CoreError, Result};
use crate::nn::{BatchNorm2d, Conv2dLayer, Mode};
use crate::tensor::{Bindings, Graph, NodeRef, Tensor};
use rand::Rng;

/// Equivalent receptive field of a dilated kernel: (r-1)(k-1) + k.
pub fn effective_rf(r: usize, k: usize) -> usize {
    (r - 1) * (k - 1) + k
}

/// Same-size padding for a dilated kernel, p = r(k-1)/2. Requires odd k.
pub fn same_padding(r: usize, k: usize) -> usize {
    debug_assert!(k % 2 == 1, "same-padding needs an odd kernel");
    r * (k - 1) / 2
}

#[derive(Debug, Clone)]
struct ConvBranch {
    conv: Conv2dLayer,
    bn: BatchNorm2d,
}

/// One ERD unit. All branches preserve shape; the identity branch requires
/// equal input and output channel counts, which the constructor enforces by
/// taking a single `channels`.
#[derive(Debug, Clone)]
pub struct ErdBlock {
    pub name: String,
    pub rates: Vec<usize>,
    dilated: Vec<ConvBranch>,
    point: ConvBranch,
    channels: usize,
}

impl ErdBlock {
    pub fn new<R: Rng>(name: &str, channels: usize, rates: &[usize], rng: &mut R) -> Result<Self> {
        if rates.is_empty() {
            return Err(CoreError::InvalidArgument("erd: empty dilation rates".into()));
        }
        let dilated = rates
            .iter()
            .map(|&r| ConvBranch {
                conv: Conv2dLayer::new(
                    format!("{name}.d{r}.conv"),
                    channels,
                    channels,
                    3,
                    1,
                    same_padding(r, 3),
                    r,
                    false,
                    rng,
                ),
                bn: BatchNorm2d::new(format!("{name}.d{r}.bn"), channels),
            })
            .collect();
        Ok(ErdBlock {
            name: name.to_string(),
            rates: rates.to_vec(),
            dilated,
            point: ConvBranch {
                conv: Conv2dLayer::new(format!("{name}.p1.conv"), channels, channels, 1, 1, 0, 1, false, rng),
                bn: BatchNorm2d::new(format!("{name}.p1.bn"), channels),
            },
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// silu(sum of dilated branches + 1x1 branch + identity). Branches are
    /// summed in rate order for determinism.
    pub fn forward(&self, g: &mut Graph, x: NodeRef, b: &mut Bindings, mode: Mode) -> Result<NodeRef> {
        if g.value(x).shape()[0] != self.channels {
            return Err(CoreError::ShapeMismatch {
                op: "erd identity branch",
                lhs: vec![self.channels],
                rhs: g.value(x).shape().to_vec(),
            });
        }
        let mut acc: Option<NodeRef> = None;
        for branch in &self.dilated {
            let y = branch.conv.forward(g, x, b)?;
            let y = branch.bn.forward(g, y, b, mode)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        let y = self.point.conv.forward(g, x, b)?;
        let y = self.point.bn.forward(g, y, b, mode)?;
        let mut sum = g.add(acc.expect("at least one dilated branch"), y)?;
        sum = g.add(sum, x)?;
        Ok(g.silu(sum))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for branch in &mut self.dilated {
            branch.conv.visit_params(f);
            branch.bn.visit_params(f);
        }
        self.point.conv.visit_params(f);
        self.point.bn.visit_params(f);
    }

    pub fn visit_bns(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        for branch in &mut self.dilated {
            f(&mut branch.bn);
        }
        f(&mut self.point.bn);
    }

    /// Zero every conv weight, leaving only the identity branch active.
    /// Used by tests of the residual property.
    pub fn zero_conv_weights(&mut self) {
        for branch in &mut self.dilated {
            branch.conv.weight.values_mut().fill(0.0);
        }
        self.point.conv.weight.values_mut().fill(0.0);
    }
}
