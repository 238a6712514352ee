//! Target assignment, the composite detection loss, SGD with momentum, and
//! the deterministic desk-scale training loop.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::augment::Augment;
use crate::data::Plane;
use crate::error::{CoreError, Result};
use crate::metrics::{evaluate, nms, BBox, Detection, GroundTruth, Metrics};
use crate::model::{decode, decode_box, image_to_tensor, HeadLayout, HeadNode, MsDetModel};
use crate::nn::Mode;
use crate::tensor::{sigmoid, Bindings, CustomOp, Graph, NodeRef, Tensor};

/// Optimizer and loop hyperparameters. Defaults follow the published recipe:
/// SGD momentum 0.937, initial learning rate 0.01, batch size 8.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_box: f64,
    pub lambda_obj: f64,
    /// IoU threshold for the per-epoch validation mAP.
    pub iou_match_threshold: f64,
    /// L2 decay on conv weights (affine/bias/attention scalars excluded).
    /// Without it, batchnorm reparameterization invariance lets weight norms
    /// grow until deep activations overflow.
    pub weight_decay: f64,
    /// Global gradient-norm clip applied to the batch-averaged gradients;
    /// 0 disables.
    pub grad_clip_norm: f64,
    pub augment: bool,
    /// Epochs that normalize with batch statistics (establishing the running
    /// averages) before the rest of training freezes normalization to those
    /// averages. Per-sample statistics at desk scale are noisy enough that
    /// the post-warmup phase must optimize the exact inference path.
    pub bn_warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.937,
            batch_size: 8,
            epochs: 40,
            lambda_box: 5.0,
            lambda_obj: 1.0,
            iou_match_threshold: 0.5,
            weight_decay: 5e-4,
            grad_clip_norm: 10.0,
            augment: true,
            bn_warmup_epochs: 6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn serialize(&self) -> String {
        format!(
            "lr {}\nmomentum {}\nbatch_size {}\nepochs {}\nlambda_box {}\nlambda_obj {}\niou_match_threshold {}\nweight_decay {}\ngrad_clip_norm {}\naugment {}\nbn_warmup_epochs {}\nseed {}\n",
            self.lr,
            self.momentum,
            self.batch_size,
            self.epochs,
            self.lambda_box,
            self.lambda_obj,
            self.iou_match_threshold,
            self.weight_decay,
            self.grad_clip_norm,
            self.augment,
            self.bn_warmup_epochs,
            self.seed,
        )
    }

    /// Parse the train config text format: `key value` lines with `#`
    /// comments. Unknown keys are rejected.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = format!("{source}:{}", lineno + 1);
            let (key, value) = line.split_once(char::is_whitespace).ok_or_else(|| {
                CoreError::parse(ctx.clone(), format!("expected `key value`, got {line:?}"))
            })?;
            let value = value.trim();
            let num = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| CoreError::parse(ctx.clone(), format!("bad number {v:?}")))
            };
            match key {
                "lr" => cfg.lr = num(value)?,
                "momentum" => cfg.momentum = num(value)?,
                "batch_size" => cfg.batch_size = num(value)? as usize,
                "epochs" => cfg.epochs = num(value)? as usize,
                "lambda_box" => cfg.lambda_box = num(value)?,
                "lambda_obj" => cfg.lambda_obj = num(value)?,
                "iou_match_threshold" => cfg.iou_match_threshold = num(value)?,
                "weight_decay" => cfg.weight_decay = num(value)?,
                "grad_clip_norm" => cfg.grad_clip_norm = num(value)?,
                "augment" => {
                    cfg.augment = value
                        .parse()
                        .map_err(|_| CoreError::parse(ctx.clone(), format!("bad bool {value:?}")))?
                }
                "bn_warmup_epochs" => cfg.bn_warmup_epochs = num(value)? as usize,
                "seed" => cfg.seed = num(value)? as u64,
                other => return Err(CoreError::parse(ctx, format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(CoreError::InvalidArgument(format!("bad lr {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::InvalidArgument(format!(
                "momentum {} outside [0,1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CoreError::InvalidArgument(
                "batch_size and epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One positive slot of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveSlot {
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub gt: BBox,
}

/// Assignment result for one head.
#[derive(Debug, Clone)]
pub struct HeadTargets {
    pub layout: HeadLayout,
    /// Objectness targets, `[A, G, G]` flat; 1.0 exactly at positives.
    pub obj: Vec<f64>,
    pub positives: Vec<PositiveSlot>,
}

impl HeadTargets {
    fn slot_index(&self, anchor: usize, gy: usize, gx: usize) -> usize {
        (anchor * self.layout.grid + gy) * self.layout.grid + gx
    }
}

fn shape_iou(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    let inter = w.min(aw) * h.min(ah);
    let union = w * h + aw * ah - inter;
    inter / union
}

/// Assign each ground truth to its best shape-IoU anchor at its center cell
/// on every head whose anchor size ratio lies within [1/4, 4]. A ground
/// truth admissible nowhere is forced onto the globally best anchor, so
/// nothing is dropped.
pub fn assign_targets(
    gts: &[GroundTruth],
    layouts: &[HeadLayout],
    img_size: usize,
) -> Vec<HeadTargets> {
    let mut targets: Vec<HeadTargets> = layouts
        .iter()
        .map(|l| HeadTargets {
            obj: vec![0.0; l.anchors.len() * l.grid * l.grid],
            positives: Vec::new(),
            layout: l.clone(),
        })
        .collect();
    let s = img_size as f64;

    for gt in gts {
        let (gw, gh) = (gt.bbox.w * s, gt.bbox.h * s);
        let mut assigned_any = false;
        for t in targets.iter_mut() {
            let grid = t.layout.grid;
            let gx = ((gt.bbox.cx * s / t.layout.stride as f64) as usize).min(grid - 1);
            let gy = ((gt.bbox.cy * s / t.layout.stride as f64) as usize).min(grid - 1);
            let mut admissible: Vec<(usize, f64)> = t
                .layout
                .anchors
                .iter()
                .enumerate()
                .filter(|(_, &(aw, ah))| {
                    let ratio = (gw / aw).max(aw / gw).max(gh / ah).max(ah / gh);
                    ratio <= 4.0
                })
                .map(|(i, &(aw, ah))| (i, shape_iou(gw, gh, aw, ah)))
                .collect();
            admissible.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (anchor, _) in admissible {
                let idx = t.slot_index(anchor, gy, gx);
                if t.obj[idx] == 0.0 {
                    t.obj[idx] = 1.0;
                    t.positives.push(PositiveSlot { anchor, gy, gx, gt: gt.bbox });
                    assigned_any = true;
                    break;
                }
            }
        }
        if !assigned_any {
            // Rank every (head, anchor) pair by shape IoU and take the first
            // free slot; duplicate the best slot if all are taken.
            let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
            for (hi, t) in targets.iter().enumerate() {
                for (ai, &(aw, ah)) in t.layout.anchors.iter().enumerate() {
                    candidates.push((hi, ai, shape_iou(gw, gh, aw, ah)));
                }
            }
            candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let mut placed = false;
            for &(hi, ai, _) in &candidates {
                let t = &mut targets[hi];
                let grid = t.layout.grid;
                let gx = ((gt.bbox.cx * s / t.layout.stride as f64) as usize).min(grid - 1);
                let gy = ((gt.bbox.cy * s / t.layout.stride as f64) as usize).min(grid - 1);
                let idx = t.slot_index(ai, gy, gx);
                if t.obj[idx] == 0.0 {
                    t.obj[idx] = 1.0;
                    t.positives.push(PositiveSlot { anchor: ai, gy, gx, gt: gt.bbox });
                    placed = true;
                    break;
                }
            }
            if !placed {
                let (hi, ai, _) = candidates[0];
                let t = &mut targets[hi];
                let grid = t.layout.grid;
                let gx = ((gt.bbox.cx * s / t.layout.stride as f64) as usize).min(grid - 1);
                let gy = ((gt.bbox.cy * s / t.layout.stride as f64) as usize).min(grid - 1);
                t.positives.push(PositiveSlot { anchor: ai, gy, gx, gt: gt.bbox });
            }
        }
    }
    targets
}

/// IoU of a decoded box against a fixed ground truth, with the gradient
/// w.r.t. the decoded (cx, cy, w, h).
fn iou_with_grad(p: (f64, f64, f64, f64), q: &BBox) -> (f64, [f64; 4]) {
    let (pcx, pcy, pw, ph) = p;
    let (pl, pr) = (pcx - pw / 2.0, pcx + pw / 2.0);
    let (pt, pb) = (pcy - ph / 2.0, pcy + ph / 2.0);
    let (gl, gt, gr, gb) = q.corners();
    let iw = pr.min(gr) - pl.max(gl);
    let ih = pb.min(gb) - pt.max(gt);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let ap = pw * ph;
    let union = ap + q.area() - inter;
    let iou = inter / union;

    let d_iw_dpl = if pl > gl { -1.0 } else { 0.0 };
    let d_iw_dpr = if pr < gr { 1.0 } else { 0.0 };
    let d_ih_dpt = if pt > gt { -1.0 } else { 0.0 };
    let d_ih_dpb = if pb < gb { 1.0 } else { 0.0 };

    let d_i = [
        ih * (d_iw_dpl + d_iw_dpr),                  // d inter / d cx
        iw * (d_ih_dpt + d_ih_dpb),                  // d inter / d cy
        ih * 0.5 * (d_iw_dpr - d_iw_dpl),            // d inter / d w
        iw * 0.5 * (d_ih_dpb - d_ih_dpt),            // d inter / d h
    ];
    let d_ap = [0.0, 0.0, ph, pw];
    let mut grad = [0.0; 4];
    for i in 0..4 {
        // iou = I/U with U = Ap + Ag - I:
        // d iou = (I' (U + I) - I Ap') / U^2
        grad[i] = (d_i[i] * (union + inter) - inter * d_ap[i]) / (union * union);
    }
    (iou, grad)
}

/// Binary cross-entropy on a logit, numerically stable.
fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// The composite loss as one tape node over all head tensors:
/// lambda_box * mean over positives of (1 - IoU(decoded, gt))
/// + lambda_obj * mean over every slot of BCE(objectness, target).
#[derive(Debug)]
pub struct DetectionLossOp {
    pub targets: Vec<HeadTargets>,
    pub lambda_box: f64,
    pub lambda_obj: f64,
    /// (box_term, obj_term) recorded by the last forward, for logging.
    pub parts: Cell<(f64, f64)>,
}

impl DetectionLossOp {
    fn check_shapes(&self, inputs: &[&Tensor]) -> Result<()> {
        if inputs.len() != self.targets.len() {
            return Err(CoreError::InvalidArgument(format!(
                "loss got {} heads for {} target sets",
                inputs.len(),
                self.targets.len()
            )));
        }
        for (t, head) in self.targets.iter().zip(inputs) {
            let l = &t.layout;
            let want = [l.anchors.len() * (5 + l.num_classes), l.grid, l.grid];
            if head.shape() != want {
                return Err(CoreError::ShapeMismatch {
                    op: "detection_loss",
                    lhs: want.to_vec(),
                    rhs: head.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn counts(&self) -> (usize, usize) {
        let n_pos = self.targets.iter().map(|t| t.positives.len()).sum::<usize>();
        let n_slots = self.targets.iter().map(|t| t.obj.len()).sum::<usize>();
        (n_pos.max(1), n_slots)
    }
}

impl CustomOp for DetectionLossOp {
    fn name(&self) -> &'static str {
        "detection_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.check_shapes(inputs)?;
        let (n_pos, n_slots) = self.counts();
        let mut box_sum = 0.0;
        let mut obj_sum = 0.0;
        for (t, head) in self.targets.iter().zip(inputs) {
            let l = &t.layout;
            let per = 5 + l.num_classes;
            let img_size = l.grid * l.stride;
            for p in &t.positives {
                let base = p.anchor * per;
                let at = |ch: usize| head.at3(base + ch, p.gy, p.gx);
                let decoded = decode_box(
                    at(0),
                    at(1),
                    at(2),
                    at(3),
                    p.gx,
                    p.gy,
                    l.anchors[p.anchor],
                    l.stride,
                    img_size,
                );
                let (iou, _) = iou_with_grad(decoded, &p.gt);
                box_sum += 1.0 - iou;
            }
            for (a, _) in l.anchors.iter().enumerate() {
                let obj_ch = a * per + 4;
                for gy in 0..l.grid {
                    for gx in 0..l.grid {
                        let target = t.obj[t.slot_index(a, gy, gx)];
                        obj_sum += bce_with_logit(head.at3(obj_ch, gy, gx), target);
                    }
                }
            }
        }
        let box_term = box_sum / n_pos as f64;
        let obj_term = obj_sum / n_slots as f64;
        let loss = self.lambda_box * box_term + self.lambda_obj * obj_term;
        if !loss.is_finite() {
            return Err(CoreError::NonFinite("detection_loss"));
        }
        self.parts.set((box_term, obj_term));
        Ok(Tensor::scalar(loss))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gout: &[f64]) -> Vec<Vec<f64>> {
        let g0 = gout[0];
        let (n_pos, n_slots) = self.counts();
        let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| vec![0.0; t.len()]).collect();
        for ((t, head), grad) in self.targets.iter().zip(inputs).zip(grads.iter_mut()) {
            let l = &t.layout;
            let per = 5 + l.num_classes;
            let img_size = l.grid * l.stride;
            let grid = l.grid;
            let idx3 = |ch: usize, gy: usize, gx: usize| (ch * grid + gy) * grid + gx;

            for p in &t.positives {
                let base = p.anchor * per;
                let at = |ch: usize| head.at3(base + ch, p.gy, p.gx);
                let (tx, ty, tw, th) = (at(0), at(1), at(2), at(3));
                let decoded = decode_box(
                    tx,
                    ty,
                    tw,
                    th,
                    p.gx,
                    p.gy,
                    l.anchors[p.anchor],
                    l.stride,
                    img_size,
                );
                let (_, diou) = iou_with_grad(decoded, &p.gt);
                let scale = -g0 * self.lambda_box / n_pos as f64;
                let cell = l.stride as f64 / img_size as f64;
                let (aw, ah) = l.anchors[p.anchor];
                // chain through the decode parameterization
                let sx = sigmoid(tx);
                let sy = sigmoid(ty);
                let sw = sigmoid(tw);
                let sh = sigmoid(th);
                grad[idx3(base, p.gy, p.gx)] += scale * diou[0] * 2.0 * sx * (1.0 - sx) * cell;
                grad[idx3(base + 1, p.gy, p.gx)] += scale * diou[1] * 2.0 * sy * (1.0 - sy) * cell;
                grad[idx3(base + 2, p.gy, p.gx)] +=
                    scale * diou[2] * aw / img_size as f64 * 8.0 * sw * sw * (1.0 - sw);
                grad[idx3(base + 3, p.gy, p.gx)] +=
                    scale * diou[3] * ah / img_size as f64 * 8.0 * sh * sh * (1.0 - sh);
            }

            let obj_scale = g0 * self.lambda_obj / n_slots as f64;
            for a in 0..l.anchors.len() {
                let obj_ch = a * per + 4;
                for gy in 0..grid {
                    for gx in 0..grid {
                        let target = t.obj[t.slot_index(a, gy, gx)];
                        let logit = head.at3(obj_ch, gy, gx);
                        grad[idx3(obj_ch, gy, gx)] += obj_scale * (sigmoid(logit) - target);
                    }
                }
            }
        }
        grads
    }
}

/// Attach the loss to the tape over the given head nodes.
pub fn detection_loss(
    g: &mut Graph,
    heads: &[HeadNode],
    targets: Vec<HeadTargets>,
    lambda_box: f64,
    lambda_obj: f64,
) -> Result<(NodeRef, Rc<DetectionLossOp>)> {
    let op = Rc::new(DetectionLossOp {
        targets,
        lambda_box,
        lambda_obj,
        parts: Cell::new((0.0, 0.0)),
    });
    let inputs: Vec<NodeRef> = heads.iter().map(|h| h.node).collect();
    let node = g.apply_custom(op.clone() as Rc<dyn CustomOp>, &inputs)?;
    Ok((node, op))
}

/// v <- momentum*v + g; p <- p - lr*v.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// SGD with momentum over named parameters; velocity state keyed by name.
/// Conv weights (names ending `.weight`) receive L2 decay; normalization
/// affine, biases, and the attention scalars do not.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdOptimizer {
            lr,
            momentum,
            weight_decay: 0.0,
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn step(&mut self, model: &mut MsDetModel, grads: &[(String, Vec<f64>)]) {
        let by_name: BTreeMap<&str, &Vec<f64>> =
            grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        let (lr, momentum, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_params(&mut |name, tensor| {
            let grad = by_name
                .get(name)
                .unwrap_or_else(|| panic!("no gradient bound for parameter {name}"));
            debug_assert_eq!(grad.len(), tensor.len());
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; tensor.len()]);
            if wd > 0.0 && name.ends_with(".weight") {
                let decayed: Vec<f64> = grad
                    .iter()
                    .zip(tensor.values())
                    .map(|(g, p)| g + wd * p)
                    .collect();
                sgd_step(tensor.values_mut(), &decayed, v, lr, momentum);
            } else {
                sgd_step(tensor.values_mut(), grad, v, lr, momentum);
            }
        });
    }
}

/// Fixed-order gradient averaging across a batch.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    sums: Vec<(String, Vec<f64>)>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: Vec<(String, Vec<f64>)>) {
        if self.sums.is_empty() {
            self.sums = grads;
        } else {
            assert_eq!(self.sums.len(), grads.len(), "binding order changed");
            for ((name, sum), (gname, g)) in self.sums.iter_mut().zip(grads) {
                assert_eq!(*name, gname, "binding order changed");
                for (a, b) in sum.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        self.count += 1;
    }

    pub fn mean(mut self) -> Vec<(String, Vec<f64>)> {
        let n = self.count.max(1) as f64;
        for (_, sum) in self.sums.iter_mut() {
            for v in sum.iter_mut() {
                *v /= n;
            }
        }
        self.sums
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [(String, Vec<f64>)], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let total: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_box: f64,
    pub loss_obj: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss_box,loss_obj,precision,recall,map50\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch, row.loss_box, row.loss_obj, row.precision, row.recall, row.map50
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Set when training stopped early on a non-finite loss; the model keeps
    /// the parameters of the last completed step.
    pub aborted: Option<String>,
}

pub type Dataset = [(Plane<u8>, Vec<GroundTruth>)];

/// Inference + decode + per-class NMS over a dataset, then the metric suite.
pub fn evaluate_model(
    model: &MsDetModel,
    dataset: &Dataset,
    iou_thresholds: &[f64],
    conf_threshold: f64,
    nms_iou: f64,
    max_dets: usize,
) -> Result<Metrics> {
    let mut dets_per_image: Vec<Vec<Detection>> = Vec::with_capacity(dataset.len());
    let mut gts_per_image = Vec::with_capacity(dataset.len());
    for (image, gts) in dataset {
        let input = image_to_tensor(image, model.config.in_channels);
        let preds = model.predict(&input)?;
        let mut dets = nms(&decode(&preds, conf_threshold)?, nms_iou);
        dets.truncate(max_dets);
        dets_per_image.push(dets);
        gts_per_image.push(gts.clone());
    }
    evaluate(&dets_per_image, &gts_per_image, iou_thresholds)
}

/// Deterministic training loop: seeded shuffle, seeded augmentation draws,
/// per-sample graphs with fixed-order gradient averaging, sequential
/// batchnorm running-stat updates, one optimizer step per batch, and a
/// validation pass per epoch.
pub fn train(
    model: &mut MsDetModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CoreError::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = SgdOptimizer::new(cfg.lr, cfg.momentum).with_weight_decay(cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    // last-good snapshot, restored when a non-finite loss aborts the run
    let mut snapshot = model.state_entries();

    for epoch in 1..=cfg.epochs {
        let mode = if epoch <= cfg.bn_warmup_epochs { Mode::Train } else { Mode::Infer };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut box_sum = 0.0;
        let mut obj_sum = 0.0;
        let mut samples = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradAccumulator::new();
            for &idx in batch {
                let (image, boxes) = &train_set[idx];
                let aug = if cfg.augment {
                    Augment::sample(&mut rng)
                } else {
                    Augment::identity()
                };
                let (image, boxes) = aug.apply(image, boxes, &mut rng)?;
                let input = image_to_tensor(&image, model.config.in_channels);

                let mut g = Graph::new();
                let mut b = Bindings::new();
                let x = g.constant(input);
                let loss_result = model
                    .forward(&mut g, x, &mut b, mode)
                    .and_then(|heads| {
                        let layouts = model.head_layouts(image.width);
                        let targets = assign_targets(&boxes, &layouts, image.width);
                        detection_loss(&mut g, &heads, targets, cfg.lambda_box, cfg.lambda_obj)
                    });
                let (loss, op) = match loss_result {
                    Ok(v) => v,
                    Err(CoreError::NonFinite(what)) => {
                        model.load_state(&snapshot)?;
                        return Ok(TrainOutcome {
                            log,
                            aborted: Some(format!(
                                "non-finite {what} at epoch {epoch}; restored the last end-of-epoch parameters"
                            )),
                        });
                    }
                    Err(e) => return Err(e),
                };
                g.backward(loss)?;
                let (bt, ot) = op.parts.get();
                box_sum += bt;
                obj_sum += ot;
                samples += 1;
                acc.add(b.grads(&g));
                model.apply_bn_updates(&g, &b);
            }
            let mut grads = acc.mean();
            clip_grad_norm(&mut grads, cfg.grad_clip_norm);
            opt.step(model, &grads);
        }

        let (precision, recall, map50) = if val_set.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let m = evaluate_model(model, val_set, &[cfg.iou_match_threshold], 0.05, 0.5, 300)?;
            (m.precision, m.recall, m.map)
        };
        log.push(EpochLog {
            epoch,
            loss_box: box_sum / samples.max(1) as f64,
            loss_obj: obj_sum / samples.max(1) as f64,
            precision,
            recall,
            map50,
        });
        snapshot = model.state_entries();
    }
    Ok(TrainOutcome { log, aborted: None })
}
