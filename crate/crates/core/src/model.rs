//! The assembled detector: configurable backbone of CBS/ERD/SPP/PCAM stages,
//! the TODB high-resolution fusion branch, anchor-grid prediction heads at
//! strides 4/8/16, and the box decode/encode pair.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchConfig, BranchSpec, LayerSpec, Tap, TracedLayer};
use crate::data::Plane;
use crate::erd::{effective_rf, ErdBlock};
use crate::error::{CoreError, Result};
use crate::metrics::{BBox, Detection};
use crate::nn::{Activation, BatchNorm2d, CbsBlock, Conv2dLayer, Mode, SppBlock};
use crate::pcam::{PcamBlock, PcamFusion};
use crate::tensor::{sigmoid, Bindings, Graph, NodeRef, Tensor};

/// Structural description of one model instance. Parsed from / serialized to
/// the `.arch` text format.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub profile: String,
    pub input_size: usize,
    pub in_channels: usize,
    /// Channel widths after the four downsampling stages (strides 2/4/8/16).
    pub widths: [usize; 4],
    /// ERD units appended to the stride-4 stage.
    pub erd_units: usize,
    pub erd_rates: Vec<usize>,
    pub spp_pools: [usize; 3],
    /// Stages (2 and/or 3, counting the stem as stage 0) that end in PCAM.
    pub pcam_stages: Vec<usize>,
    pub todb: bool,
    pub num_classes: usize,
    pub anchors_per_head: usize,
    /// Anchor base size = factor * stride, in pixels.
    pub anchor_base_factor: f64,
    pub anchor_scales: Vec<f64>,
    /// Activation applied by the TODB convs. SiLU is the default sigma;
    /// the desk profile uses leaky ReLU so the stride-4 prediction map can
    /// express arbitrarily negative logits.
    pub todb_activation: Activation,
}

impl ModelConfig {
    /// Laptop-scale profile used throughout the tests.
    pub fn desk() -> Self {
        ModelConfig {
            profile: "desk".into(),
            input_size: 96,
            in_channels: 3,
            widths: [8, 16, 32, 64],
            erd_units: 2,
            erd_rates: vec![1, 3, 5],
            spp_pools: [5, 9, 13],
            pcam_stages: vec![2, 3],
            todb: true,
            num_classes: 1,
            anchors_per_head: 3,
            anchor_base_factor: 4.0,
            anchor_scales: vec![0.5, 1.0, 2.0],
            todb_activation: Activation::LeakyRelu(TODB_LEAKY_SLOPE),
        }
    }

    /// Full-scale profile whose symbolic trace reproduces the published
    /// shape pipeline (640 input, 80x80x128 F1, 160x160x18 F4).
    pub fn paper640() -> Self {
        ModelConfig {
            profile: "paper-640".into(),
            input_size: 640,
            in_channels: 3,
            widths: [32, 64, 128, 256],
            erd_units: 2,
            erd_rates: vec![1, 3, 5],
            spp_pools: [5, 9, 13],
            pcam_stages: vec![2, 3],
            todb: true,
            num_classes: 1,
            anchors_per_head: 3,
            anchor_base_factor: 4.0,
            anchor_scales: vec![0.5, 1.0, 2.0],
            todb_activation: Activation::Silu,
        }
    }

    pub fn by_profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-640" => Ok(Self::paper640()),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown profile {other}, expected desk or paper-640"
            ))),
        }
    }

    pub fn head_channels(&self) -> usize {
        self.anchors_per_head * (5 + self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::InvalidArgument(msg));
        if !self.input_size.is_multiple_of(16) || self.input_size == 0 {
            return bad(format!(
                "input_size {} must be a positive multiple of 16",
                self.input_size
            ));
        }
        if self.widths.contains(&0) {
            return bad("widths must be positive".into());
        }
        if self.erd_units > 0 && self.erd_rates.is_empty() {
            return bad("erd_rates empty with erd_units > 0".into());
        }
        if self.num_classes == 0 || self.anchors_per_head == 0 {
            return bad("num_classes and anchors_per_head must be >= 1".into());
        }
        if self.anchor_scales.len() != self.anchors_per_head {
            return bad(format!(
                "{} anchor scales for {} anchors per head",
                self.anchor_scales.len(),
                self.anchors_per_head
            ));
        }
        for &s in &self.pcam_stages {
            if !(2..=3).contains(&s) {
                return bad(format!("pcam stage {s} must be 2 or 3"));
            }
        }
        Ok(())
    }

    /// Anchor pixel sizes (square) for one head stride.
    pub fn anchors_for(&self, stride: usize) -> Vec<(f64, f64)> {
        self.anchor_scales
            .iter()
            .map(|s| {
                let px = s * self.anchor_base_factor * stride as f64;
                (px, px)
            })
            .collect()
    }

    pub fn serialize(&self) -> String {
        let join = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let joinf = |v: &[f64]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        format!(
            "profile {}\ninput_size {}\nin_channels {}\nwidths {}\nerd_units {}\nerd_rates {}\nspp_pools {}\npcam_stages {}\ntodb {}\ntodb_activation {}\nnum_classes {}\nanchors_per_head {}\nanchor_base_factor {}\nanchor_scales {}\n",
            self.profile,
            self.input_size,
            self.in_channels,
            join(&self.widths),
            self.erd_units,
            join(&self.erd_rates),
            join(&self.spp_pools),
            join(&self.pcam_stages),
            self.todb,
            match self.todb_activation {
                Activation::Silu => "silu".to_string(),
                Activation::LeakyRelu(slope) if slope == TODB_LEAKY_SLOPE => "leaky_relu".to_string(),
                Activation::LeakyRelu(slope) => format!("leaky_relu:{slope}"),
            },
            self.num_classes,
            self.anchors_per_head,
            self.anchor_base_factor,
            joinf(&self.anchor_scales),
        )
    }

    /// Parse the `.arch` text format: `key value` lines, `#` comments.
    /// Unknown keys are rejected.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut seen_profile_base = false;
        // First pass: an optional `profile` line selects the base config.
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if let Some(rest) = line.strip_prefix("profile") {
                cfg = Self::by_profile(rest.trim())?;
                seen_profile_base = true;
                break;
            }
        }
        if !seen_profile_base {
            cfg = Self::desk();
        }
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = format!("{source}:{}", lineno + 1);
            let (key, value) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| CoreError::parse(ctx.clone(), format!("expected `key value`, got {line:?}")))?;
            let value = value.trim();
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| CoreError::parse(ctx.clone(), format!("bad integer {v:?}")))
            };
            let parse_list = |v: &str| -> Result<Vec<usize>> {
                if v.is_empty() || v == "none" {
                    return Ok(Vec::new());
                }
                v.split(',').map(|t| parse_usize(t.trim())).collect()
            };
            match key {
                "profile" => cfg.profile = value.to_string(),
                "input_size" => cfg.input_size = parse_usize(value)?,
                "in_channels" => cfg.in_channels = parse_usize(value)?,
                "widths" => {
                    let v = parse_list(value)?;
                    if v.len() != 4 {
                        return Err(CoreError::parse(ctx, "widths wants 4 values"));
                    }
                    cfg.widths = [v[0], v[1], v[2], v[3]];
                }
                "erd_units" => cfg.erd_units = parse_usize(value)?,
                "erd_rates" => cfg.erd_rates = parse_list(value)?,
                "spp_pools" => {
                    let v = parse_list(value)?;
                    if v.len() != 3 {
                        return Err(CoreError::parse(ctx, "spp_pools wants 3 values"));
                    }
                    cfg.spp_pools = [v[0], v[1], v[2]];
                }
                "pcam_stages" => cfg.pcam_stages = parse_list(value)?,
                "todb" => {
                    cfg.todb = value
                        .parse()
                        .map_err(|_| CoreError::parse(ctx.clone(), format!("bad bool {value:?}")))?
                }
                "todb_activation" => {
                    cfg.todb_activation = match value {
                        "silu" => Activation::Silu,
                        "leaky_relu" => Activation::LeakyRelu(TODB_LEAKY_SLOPE),
                        other => match other.strip_prefix("leaky_relu:").and_then(|s| s.parse().ok()) {
                            Some(slope) => Activation::LeakyRelu(slope),
                            None => {
                                return Err(CoreError::parse(ctx, format!("unknown activation {other:?}")));
                            }
                        },
                    }
                }
                "num_classes" => cfg.num_classes = parse_usize(value)?,
                "anchors_per_head" => cfg.anchors_per_head = parse_usize(value)?,
                "anchor_base_factor" => {
                    cfg.anchor_base_factor = value
                        .parse()
                        .map_err(|_| CoreError::parse(ctx.clone(), format!("bad number {value:?}")))?
                }
                "anchor_scales" => {
                    cfg.anchor_scales = value
                        .split(',')
                        .map(|t| {
                            t.trim()
                                .parse()
                                .map_err(|_| CoreError::parse(ctx.clone(), format!("bad number {t:?}")))
                        })
                        .collect::<Result<Vec<f64>>>()?
                }
                other => {
                    return Err(CoreError::parse(ctx, format!("unknown key {other:?}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Expand to the analyzer's layer-level view. Multi-branch blocks appear
    /// as their maximum-RF branch with the per-branch RFs attached.
    pub fn to_arch_config(&self) -> ArchConfig {
        let [c1, c2, c3, c4] = self.widths;
        let mut arch = ArchConfig::new(self.input_size, self.in_channels);
        arch.target_size = Some(20.0);
        let conv = |k, s, p, r| LayerSpec::Conv { k, s, p, r };

        arch.layers.push(TracedLayer::new(conv(3, 2, 1, 1)).labeled("stem").channels(c1));
        arch.layers.push(TracedLayer::new(conv(3, 2, 1, 1)).labeled("down1").channels(c2));
        for i in 0..self.erd_units {
            let max_r = self.erd_rates.iter().copied().max().unwrap_or(1);
            let mut rfs: Vec<usize> = self.erd_rates.iter().map(|&r| effective_rf(r, 3)).collect();
            rfs.push(1); // 1x1 branch
            rfs.push(1); // identity branch
            arch.layers.push(
                TracedLayer::new(conv(3, 1, max_r, max_r))
                    .labeled(format!("erd.{i}"))
                    .channels(c2)
                    .with_branch_rfs(rfs),
            );
        }
        let f2_after = arch.layers.len() - 1;
        arch.layers.push(TracedLayer::new(conv(3, 2, 1, 1)).labeled("down2").channels(c3));
        let mut pcam_idx = 0;
        if self.pcam_stages.contains(&2) {
            arch.layers.push(
                TracedLayer::new(conv(1, 1, 0, 1))
                    .labeled(format!("pcam.{pcam_idx}"))
                    .channels(c3),
            );
            pcam_idx += 1;
        }
        let f1_after = arch.layers.len() - 1;
        arch.layers.push(TracedLayer::new(conv(3, 2, 1, 1)).labeled("down3").channels(c4));
        let spp_mid = (c4 / 2).max(1);
        arch.layers.push(TracedLayer::new(conv(1, 1, 0, 1)).labeled("spp.entry").channels(spp_mid));
        let max_pool = *self.spp_pools.iter().max().expect("3 pools");
        arch.layers.push(
            TracedLayer::new(LayerSpec::Pool { k: max_pool, s: 1, p: (max_pool - 1) / 2 })
                .labeled("spp.pool")
                .channels(spp_mid * 4)
                .with_branch_rfs(vec![1, self.spp_pools[0], self.spp_pools[1], self.spp_pools[2]]),
        );
        arch.layers.push(TracedLayer::new(conv(1, 1, 0, 1)).labeled("spp.exit").channels(c4));
        if self.pcam_stages.contains(&3) {
            arch.layers.push(
                TracedLayer::new(conv(1, 1, 0, 1))
                    .labeled(format!("pcam.{pcam_idx}"))
                    .channels(c4),
            );
        }
        let p16_after = arch.layers.len() - 1;

        arch.taps.push(Tap { name: "f2".into(), after: Some(f2_after) });
        arch.taps.push(Tap { name: "f1".into(), after: Some(f1_after) });
        arch.taps.push(Tap { name: "p16".into(), after: Some(p16_after) });

        let head_c = self.head_channels();
        if self.todb {
            arch.branches.push(BranchSpec {
                name: "head4.todb".into(),
                from: "f1".into(),
                layers: vec![
                    TracedLayer::new(conv(1, 1, 0, 1)).labeled("w1 (F1')").channels(c2),
                    TracedLayer::new(LayerSpec::Upsample { f: 2 }).labeled("upsample"),
                    TracedLayer::new(LayerSpec::Add { tap: "f2".into() }).labeled("fuse F2 (F3)"),
                    TracedLayer::new(conv(3, 1, 1, 1)).labeled("w2 (F4)").channels(head_c),
                ],
            });
        } else {
            arch.branches.push(BranchSpec {
                name: "head4".into(),
                from: "f2".into(),
                layers: vec![TracedLayer::new(conv(3, 1, 1, 1)).labeled("head4").channels(head_c)],
            });
        }
        arch.branches.push(BranchSpec {
            name: "head8".into(),
            from: "f1".into(),
            layers: vec![TracedLayer::new(conv(3, 1, 1, 1)).labeled("head8").channels(head_c)],
        });
        arch.branches.push(BranchSpec {
            name: "head16".into(),
            from: "p16".into(),
            layers: vec![TracedLayer::new(conv(3, 1, 1, 1)).labeled("head16").channels(head_c)],
        });
        arch
    }
}

/// The TODB branch: F1' = silu(W1 * F1) via 1x1 conv, nearest x2 upsample,
/// elementwise fusion with F2, then F4 = silu(W2 * F3).
#[derive(Debug, Clone)]
pub struct TodbBranch {
    pub w1: Conv2dLayer,
    pub w2: Conv2dLayer,
    pub activation: Activation,
}

impl TodbBranch {
    pub fn new<R: rand::Rng>(c_f1: usize, c_f2: usize, head_c: usize, activation: Activation, rng: &mut R) -> Self {
        TodbBranch {
            w1: Conv2dLayer::new("todb.w1", c_f1, c_f2, 1, 1, 0, 1, true, rng),
            w2: Conv2dLayer::with_std("todb.w2", c_f2, head_c, 3, 1, 1, 1, true, 0.01, rng),
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, f1: NodeRef, f2: NodeRef, b: &mut Bindings) -> Result<NodeRef> {
        let y = self.w1.forward(g, f1, b)?;
        let f1p = self.activation.apply(g, y);
        let up = g.upsample_nearest(f1p, 2)?;
        let f3 = g.add(up, f2)?;
        let y = self.w2.forward(g, f3, b)?;
        Ok(self.activation.apply(g, y))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.w1.visit_params(f);
        self.w2.visit_params(f);
    }
}

/// Raw output of one prediction head.
#[derive(Debug, Clone)]
pub struct RawPrediction {
    /// `[A*(5+K), G, G]`, channel layout per anchor: tx ty tw th obj cls..
    pub tensor: Tensor,
    pub stride: usize,
    /// Anchor sizes in input pixels.
    pub anchors: Vec<(f64, f64)>,
    pub num_classes: usize,
}

impl RawPrediction {
    pub fn grid(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// Head output still attached to the tape, for training.
#[derive(Debug, Clone, Copy)]
pub struct HeadNode {
    pub node: NodeRef,
    pub stride: usize,
}

/// Geometry of one head, used by target assignment and decode.
#[derive(Debug, Clone)]
pub struct HeadLayout {
    pub stride: usize,
    pub grid: usize,
    pub anchors: Vec<(f64, f64)>,
    pub num_classes: usize,
}

pub const HEAD_STRIDES: [usize; 3] = [4, 8, 16];

/// Negative-side slope of the desk TODB activation. Small slopes throttle
/// objectness learning on the stride-4 prediction map (the post-activation
/// logit only moves ~slope^2 as fast as on an unactivated head), so this
/// stays near unity.
pub const TODB_LEAKY_SLOPE: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct MsDetModel {
    pub config: ModelConfig,
    pub stem: CbsBlock,
    pub down1: CbsBlock,
    pub erds: Vec<ErdBlock>,
    pub down2: CbsBlock,
    pub pcam8: Option<PcamBlock>,
    pub down3: CbsBlock,
    pub spp: SppBlock,
    pub pcam16: Option<PcamBlock>,
    pub todb: Option<TodbBranch>,
    pub head4_plain: Option<Conv2dLayer>,
    pub head8: Conv2dLayer,
    pub head16: Conv2dLayer,
}

impl MsDetModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let [c1, c2, c3, c4] = config.widths;
        let head_c = config.head_channels();

        let stem = CbsBlock::new("stem", config.in_channels, c1, 3, 2, 1, rng);
        let down1 = CbsBlock::new("down1", c1, c2, 3, 2, 1, rng);
        let erds = (0..config.erd_units)
            .map(|i| ErdBlock::new(&format!("erd.{i}"), c2, &config.erd_rates, rng))
            .collect::<Result<Vec<_>>>()?;
        let down2 = CbsBlock::new("down2", c2, c3, 3, 2, 1, rng);
        let mut pcam_idx = 0;
        let pcam8 = config.pcam_stages.contains(&2).then(|| {
            let b = PcamBlock::new(&format!("pcam.{pcam_idx}"), c3, PcamFusion::Sum, rng);
            pcam_idx += 1;
            b
        });
        let down3 = CbsBlock::new("down3", c3, c4, 3, 2, 1, rng);
        let spp = SppBlock::new("spp", c4, c4, config.spp_pools, rng)?;
        let pcam16 = config
            .pcam_stages
            .contains(&3)
            .then(|| PcamBlock::new(&format!("pcam.{pcam_idx}"), c4, PcamFusion::Sum, rng));
        let todb = config
            .todb
            .then(|| TodbBranch::new(c3, c2, head_c, config.todb_activation, rng));
        let head4_plain = (!config.todb)
            .then(|| Conv2dLayer::with_std("head4", c2, head_c, 3, 1, 1, 1, true, 0.01, rng));
        let head8 = Conv2dLayer::with_std("head8", c3, head_c, 3, 1, 1, 1, true, 0.01, rng);
        let head16 = Conv2dLayer::with_std("head16", c4, head_c, 3, 1, 1, 1, true, 0.01, rng);

        let mut model = MsDetModel {
            config,
            stem,
            down1,
            erds,
            down2,
            pcam8,
            down3,
            spp,
            pcam16,
            todb,
            head4_plain,
            head8,
            head16,
        };
        model.init_head_biases();
        Ok(model)
    }

    /// With a single class and no class loss, the class logit is pinned high
    /// at init so confidence reduces to sigmoid(objectness) instead of being
    /// modulated by an untrained channel.
    fn init_head_biases(&mut self) {
        let per = 5 + self.config.num_classes;
        let anchors = self.config.anchors_per_head;
        let single_class = self.config.num_classes == 1;
        let fix = |conv: &mut Conv2dLayer| {
            if let Some(bias) = conv.bias.as_mut() {
                for a in 0..anchors {
                    if single_class {
                        bias.values_mut()[a * per + 5] = 6.0;
                    }
                }
            }
        };
        if let Some(t) = &mut self.todb {
            fix(&mut t.w2);
        }
        if let Some(h) = &mut self.head4_plain {
            fix(h);
        }
        fix(&mut self.head8);
        fix(&mut self.head16);
    }

    /// Run the backbone and heads on a `[C, S, S]` image already registered
    /// on the tape. Returns one head node per stride in `HEAD_STRIDES` order.
    pub fn forward(
        &self,
        g: &mut Graph,
        image: NodeRef,
        b: &mut Bindings,
        mode: Mode,
    ) -> Result<Vec<HeadNode>> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.config.in_channels || shape[1] != shape[2] {
            return Err(CoreError::InvalidShape(format!(
                "model input wants [{}, S, S], got {shape:?}",
                self.config.in_channels
            )));
        }
        let s = shape[1];
        let max_stride = *HEAD_STRIDES.last().unwrap();
        if !s.is_multiple_of(max_stride) {
            return Err(CoreError::InvalidArgument(format!(
                "input size {s} not divisible by the largest head stride {max_stride}"
            )));
        }

        let x = self.stem.forward(g, image, b, mode)?;
        let mut x = self.down1.forward(g, x, b, mode)?;
        for erd in &self.erds {
            x = erd.forward(g, x, b, mode)?;
        }
        let f2 = x;
        let mut x = self.down2.forward(g, f2, b, mode)?;
        if let Some(p) = &self.pcam8 {
            x = p.forward(g, x, b)?;
        }
        let f1 = x;
        let mut x = self.down3.forward(g, f1, b, mode)?;
        x = self.spp.forward(g, x, b, mode)?;
        if let Some(p) = &self.pcam16 {
            x = p.forward(g, x, b)?;
        }
        let p16 = x;

        let head4 = match (&self.todb, &self.head4_plain) {
            (Some(todb), _) => todb.forward(g, f1, f2, b)?,
            (None, Some(plain)) => plain.forward(g, f2, b)?,
            (None, None) => unreachable!("constructor always builds a stride-4 head"),
        };
        let head8 = self.head8.forward(g, f1, b)?;
        let head16 = self.head16.forward(g, p16, b)?;
        Ok(vec![
            HeadNode { node: head4, stride: 4 },
            HeadNode { node: head8, stride: 8 },
            HeadNode { node: head16, stride: 16 },
        ])
    }

    /// Inference forward on a plain tensor: fresh tape, running-stat
    /// normalization, detached outputs.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<RawPrediction>> {
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let x = g.constant(image.clone());
        let heads = self.forward(&mut g, x, &mut b, Mode::Infer)?;
        Ok(heads
            .iter()
            .map(|h| RawPrediction {
                tensor: g.value(h.node).clone(),
                stride: h.stride,
                anchors: self.config.anchors_for(h.stride),
                num_classes: self.config.num_classes,
            })
            .collect())
    }

    pub fn head_layouts(&self, input_size: usize) -> Vec<HeadLayout> {
        HEAD_STRIDES
            .iter()
            .map(|&stride| HeadLayout {
                stride,
                grid: input_size / stride,
                anchors: self.config.anchors_for(stride),
                num_classes: self.config.num_classes,
            })
            .collect()
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_params(f);
        self.down1.visit_params(f);
        for erd in &mut self.erds {
            erd.visit_params(f);
        }
        self.down2.visit_params(f);
        if let Some(p) = &mut self.pcam8 {
            p.visit_params(f);
        }
        self.down3.visit_params(f);
        self.spp.visit_params(f);
        if let Some(p) = &mut self.pcam16 {
            p.visit_params(f);
        }
        if let Some(t) = &mut self.todb {
            t.visit_params(f);
        }
        if let Some(h) = &mut self.head4_plain {
            h.visit_params(f);
        }
        self.head8.visit_params(f);
        self.head16.visit_params(f);
    }

    pub fn visit_bns(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        self.stem.visit_bns(f);
        self.down1.visit_bns(f);
        for erd in &mut self.erds {
            erd.visit_bns(f);
        }
        self.down2.visit_bns(f);
        self.down3.visit_bns(f);
        self.spp.visit_bns(f);
    }

    /// Fold one forward pass's batchnorm statistics into the running stats,
    /// in recorded (sample-sequential) order.
    pub fn apply_bn_updates(&mut self, g: &Graph, b: &Bindings) {
        for (name, node) in b.bn_nodes() {
            if let Some((mean, var)) = g.batch_stats(*node) {
                let (mean, var) = (mean.to_vec(), var.to_vec());
                self.visit_bns(&mut |bn| {
                    if bn.name == *name {
                        bn.update_running(&mean, &var);
                    }
                });
            }
        }
    }

    /// Every persistent tensor, for checkpointing: trainable parameters plus
    /// batchnorm running statistics.
    pub fn state_entries(&mut self) -> Vec<(String, Tensor)> {
        let mut entries = Vec::new();
        self.visit_params(&mut |name, t| entries.push((name.to_string(), t.clone())));
        self.visit_bns(&mut |bn| {
            entries.push((
                format!("{}.running_mean", bn.name),
                Tensor::new(vec![bn.running_mean.len()], bn.running_mean.clone()).expect("bn state"),
            ));
            entries.push((
                format!("{}.running_var", bn.name),
                Tensor::new(vec![bn.running_var.len()], bn.running_var.clone()).expect("bn state"),
            ));
        });
        entries
    }

    /// Load a checkpoint produced by [`Self::state_entries`]. Names and
    /// shapes must match exactly.
    pub fn load_state(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let map: BTreeMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut missing = Vec::new();
        let mut used = 0usize;
        let mut shape_err: Option<CoreError> = None;
        self.visit_params(&mut |name, t| match map.get(name) {
            Some(src) => {
                if src.shape() != t.shape() {
                    shape_err.get_or_insert(CoreError::ShapeMismatch {
                        op: "load_state",
                        lhs: t.shape().to_vec(),
                        rhs: src.shape().to_vec(),
                    });
                } else {
                    t.values_mut().copy_from_slice(src.values());
                    used += 1;
                }
            }
            None => missing.push(name.to_string()),
        });
        self.visit_bns(&mut |bn| {
            for (suffix, slot) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
                let key = format!("{}.{suffix}", bn.name);
                match map.get(key.as_str()) {
                    Some(src) if src.len() == slot.len() => {
                        slot.copy_from_slice(src.values());
                        used += 1;
                    }
                    Some(_) => {
                        shape_err.get_or_insert(CoreError::InvalidArgument(format!(
                            "bad length for {key}"
                        )));
                    }
                    None => missing.push(key),
                }
            }
        });
        if let Some(e) = shape_err {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(CoreError::InvalidArgument(format!(
                "checkpoint is missing {} tensors, first: {}",
                missing.len(),
                missing[0]
            )));
        }
        if used != entries.len() {
            return Err(CoreError::InvalidArgument(format!(
                "checkpoint has {} unexpected tensors",
                entries.len() - used
            )));
        }
        Ok(())
    }
}

/// Decode a single slot's logits to a normalized box (unclamped).
#[allow(clippy::too_many_arguments)]
pub fn decode_box(
    tx: f64,
    ty: f64,
    tw: f64,
    th: f64,
    gx: usize,
    gy: usize,
    anchor: (f64, f64),
    stride: usize,
    img_size: usize,
) -> (f64, f64, f64, f64) {
    let s = stride as f64 / img_size as f64;
    let cx = (gx as f64 + 2.0 * sigmoid(tx) - 0.5) * s;
    let cy = (gy as f64 + 2.0 * sigmoid(ty) - 0.5) * s;
    let w = anchor.0 * (2.0 * sigmoid(tw)).powi(2) / img_size as f64;
    let h = anchor.1 * (2.0 * sigmoid(th)).powi(2) / img_size as f64;
    (cx, cy, w, h)
}

/// Inverse of [`decode_box`] for a box whose center lies strictly inside
/// cell (gx, gy) and whose size is under 4x the anchor.
#[allow(clippy::too_many_arguments)]
pub fn encode_box(
    bbox: &BBox,
    gx: usize,
    gy: usize,
    anchor: (f64, f64),
    stride: usize,
    img_size: usize,
) -> Result<(f64, f64, f64, f64)> {
    let logit = |u: f64, what: &str| -> Result<f64> {
        if !(0.0 < u && u < 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "encode_box: {what} not representable (sigmoid arg {u})"
            )));
        }
        Ok((u / (1.0 - u)).ln())
    };
    let s = stride as f64 / img_size as f64;
    let tx = logit((bbox.cx / s - gx as f64 + 0.5) / 2.0, "cx offset")?;
    let ty = logit((bbox.cy / s - gy as f64 + 0.5) / 2.0, "cy offset")?;
    let tw = logit(((bbox.w * img_size as f64 / anchor.0).sqrt()) / 2.0, "width")?;
    let th = logit(((bbox.h * img_size as f64 / anchor.1).sqrt()) / 2.0, "height")?;
    Ok((tx, ty, tw, th))
}

/// Grid decode: every cell/anchor above the confidence threshold becomes a
/// normalized, unit-clamped [`Detection`]. Confidence is
/// sigmoid(objectness) * sigmoid(best class logit).
pub fn decode(preds: &[RawPrediction], conf_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(CoreError::InvalidArgument(format!(
            "confidence threshold {conf_threshold} outside [0,1]"
        )));
    }
    let mut dets = Vec::new();
    for pred in preds {
        let g = pred.grid();
        let img_size = g * pred.stride;
        let per_anchor = 5 + pred.num_classes;
        let expect = pred.anchors.len() * per_anchor;
        if pred.tensor.shape() != [expect, g, g] {
            return Err(CoreError::ShapeMismatch {
                op: "decode",
                lhs: vec![expect, g, g],
                rhs: pred.tensor.shape().to_vec(),
            });
        }
        for (a, &anchor) in pred.anchors.iter().enumerate() {
            let base = a * per_anchor;
            for gy in 0..g {
                for gx in 0..g {
                    let at = |ch: usize| pred.tensor.at3(base + ch, gy, gx);
                    let obj = sigmoid(at(4));
                    let (mut best_cls, mut best_p) = (0usize, f64::NEG_INFINITY);
                    for k in 0..pred.num_classes {
                        let p = at(5 + k);
                        if p > best_p {
                            best_p = p;
                            best_cls = k;
                        }
                    }
                    let confidence = obj * sigmoid(best_p);
                    if confidence < conf_threshold {
                        continue;
                    }
                    let (cx, cy, w, h) = decode_box(
                        at(0),
                        at(1),
                        at(2),
                        at(3),
                        gx,
                        gy,
                        anchor,
                        pred.stride,
                        img_size,
                    );
                    let bbox = BBox::new(cx, cy, w.max(1e-9), h.max(1e-9))?.clamp_unit();
                    dets.push(Detection {
                        bbox,
                        confidence,
                        class: best_cls,
                    });
                }
            }
        }
    }
    Ok(dets)
}

/// Replicate an 8-bit plane into a `[C, H, W]` tensor, standardized to zero
/// mean and unit variance per image. Per-image standardization keeps the
/// per-sample batchnorm statistics close to their running averages, which
/// is what makes train-mode and inference-mode forwards agree.
pub fn image_to_tensor(plane: &Plane<u8>, channels: usize) -> Tensor {
    let n = plane.width * plane.height;
    let mean = plane.data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = plane
        .data
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / n as f64;
    let inv = 1.0 / var.sqrt().max(1.0);
    let mut values = Vec::with_capacity(channels * n);
    for _ in 0..channels {
        values.extend(plane.data.iter().map(|&v| (v as f64 - mean) * inv));
    }
    Tensor::new(vec![channels, plane.height, plane.width], values).expect("image tensor")
}
