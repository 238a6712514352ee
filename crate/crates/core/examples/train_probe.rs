//! Scratch harness for timing forward/backward and watching desk-scale
//! training converge. Not part of the test suite.
//!
//!   cargo run --example train_probe -- step      # per-step cost
//!   cargo run --example train_probe -- overfit   # 8-image overfit curve
//!   cargo run --example train_probe -- full      # criterion-8-like run

use std::time::Instant;

use msdet_core::data::{generate_scene, SceneSpec};
use msdet_core::metrics::GroundTruth;
use msdet_core::model::{image_to_tensor, ModelConfig, MsDetModel};
use msdet_core::nn::Mode;
use msdet_core::tensor::{Bindings, Graph};
use msdet_core::train::{assign_targets, detection_loss, evaluate_model, train, TrainConfig};

fn dataset(n: usize, size: usize, base: u64) -> Vec<(msdet_core::data::Plane<u8>, Vec<GroundTruth>)> {
    (0..n)
        .map(|i| {
            let mut spec = SceneSpec::desk(base + i as u64);
            spec.size = size;
            let s = generate_scene(&spec).unwrap();
            (s.image, s.boxes)
        })
        .collect()
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "step".into());
    match mode.as_str() {
        "step" => {
            let model = MsDetModel::new(ModelConfig::desk(), 1).unwrap();
            let data = dataset(1, 96, 0);
            let input = image_to_tensor(&data[0].0, 3);
            let layouts = model.head_layouts(96);
            let t0 = Instant::now();
            let reps = 20;
            for _ in 0..reps {
                let mut g = Graph::new();
                let mut b = Bindings::new();
                let x = g.constant(input.clone());
                let heads = model.forward(&mut g, x, &mut b, Mode::Train).unwrap();
                let targets = assign_targets(&data[0].1, &layouts, 96);
                let (loss, _) = detection_loss(&mut g, &heads, targets, 5.0, 1.0).unwrap();
                g.backward(loss).unwrap();
                std::hint::black_box(b.grads(&g));
            }
            let dt = t0.elapsed().as_secs_f64() / reps as f64;
            println!("fwd+bwd at 96px: {:.1} ms/sample", dt * 1e3);

            let t0 = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(model.predict(&input).unwrap());
            }
            println!("inference at 96px: {:.1} ms/sample", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
        }
        "overfit" => {
            let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
            let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.01);
            let mut cfg = ModelConfig::desk();
            cfg.input_size = 64;
            if let Ok(f) = std::env::var("ANCHOR_FACTOR") { cfg.anchor_base_factor = f.parse().unwrap(); }
            let mut model = MsDetModel::new(cfg, 1).unwrap();
            let rlo: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(2.0);
            let data: Vec<_> = (0..8).map(|i| {
                let mut spec = SceneSpec::desk(100 + i as u64);
                spec.size = 64;
                spec.nodule_radius = (rlo, 6.0);
                let s = generate_scene(&spec).unwrap();
                (s.image, s.boxes)
            }).collect();
            let tc = TrainConfig {
                epochs: steps,
                lr,
                augment: false,
                seed: 3,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let out = train(&mut model, &data, &[], &tc).unwrap();
            let first = tc.lambda_box * out.log[0].loss_box + tc.lambda_obj * out.log[0].loss_obj;
            for (i, row) in out.log.iter().enumerate() {
                if i % 50 == 0 || i + 1 == out.log.len() {
                    let total = tc.lambda_box * row.loss_box + tc.lambda_obj * row.loss_obj;
                    println!(
                        "step {:>3}: total {:.4} box {:.4} obj {:.4} (ratio {:.3})",
                        row.epoch, total, row.loss_box, row.loss_obj, total / first
                    );
                }
            }
            println!("{steps} steps in {:.1}s", t0.elapsed().as_secs_f64());
            // per-positive IoU histogram on the trained model
            let layouts = model.head_layouts(64);
            let mut ious = Vec::new();
            for (img, boxes) in &data {
                let input = image_to_tensor(img, 3);
                let preds = model.predict(&input).unwrap();
                let targets = assign_targets(boxes, &layouts, 64);
                for (pred, t) in preds.iter().zip(&targets) {
                    for p in &t.positives {
                        let per = 6;
                        let base = p.anchor * per;
                        let at = |ch: usize| pred.tensor.at3(base + ch, p.gy, p.gx);
                        let (cx, cy, w, h) = msdet_core::model::decode_box(
                            at(0), at(1), at(2), at(3), p.gx, p.gy,
                            t.layout.anchors[p.anchor], t.layout.stride, 64);
                        let pb = msdet_core::metrics::BBox::new(cx, cy, w.max(1e-9), h.max(1e-9)).unwrap();
                        ious.push((t.layout.stride, msdet_core::metrics::iou(&pb, &p.gt)));
                    }
                }
            }
            for stride in [4usize, 8, 16] {
                let v: Vec<f64> = ious.iter().filter(|(s, _)| *s == stride).map(|(_, i)| *i).collect();
                let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
                let stuck = v.iter().filter(|&&i| i == 0.0).count();
                println!("stride {stride}: {} positives, mean IoU {:.3}, disjoint {}", v.len(), mean, stuck);
            }
        }
        "full" => {
            let mut cfg = ModelConfig::desk();
            if let Ok(f) = std::env::var("ANCHOR_FACTOR") { cfg.anchor_base_factor = f.parse().unwrap(); }
            let mut model = MsDetModel::new(cfg, 8).unwrap();
            let train_set = dataset(240, 96, 80_000);
            let val_set = dataset(60, 96, 90_000);
            let tc = TrainConfig { seed: 8, ..TrainConfig::default() };
            let t0 = Instant::now();
            let out = train(&mut model, &train_set, &val_set, &tc).unwrap();
            for row in out.log.iter().filter(|r| r.epoch % 4 == 0 || r.epoch == 1 || r.epoch == 40) {
                println!(
                    "epoch {:>2}: box {:.4} obj {:.4} P {:.3} R {:.3} mAP50 {:.3} [{:.0}s]",
                    row.epoch, row.loss_box, row.loss_obj, row.precision, row.recall, row.map50,
                    t0.elapsed().as_secs_f64()
                );
            }
            for nms_t in [0.2, 0.3, 0.5] {
                let m = evaluate_model(&model, &val_set, &[0.5], 0.05, nms_t, 300).unwrap();
                println!("final val mAP@0.5 (nms {nms_t}) = {:.4}  P {:.3} R {:.3}", m.map, m.precision, m.recall);
            }
        }
        "diag" => {
            let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(16);
            let mut cfg = ModelConfig::desk();
            if let Ok(f) = std::env::var("ANCHOR_FACTOR") { cfg.anchor_base_factor = f.parse().unwrap(); }
            if let Ok(sl) = std::env::var("TODB_SLOPE") { cfg.todb_activation = msdet_core::nn::Activation::LeakyRelu(sl.parse().unwrap()); }
            if let Ok(w) = std::env::var("WIDTHS") {
                let v: Vec<usize> = w.split(',').map(|t| t.parse().unwrap()).collect();
                cfg.widths = [v[0], v[1], v[2], v[3]];
            }
            let mut model = MsDetModel::new(cfg, 1).unwrap();
            let train_set = dataset(120, 96, 10_000);
            let val_set = dataset(40, 96, 20_000);
            let warmup: usize = std::env::var("BN_WARMUP").ok().and_then(|s| s.parse().ok()).unwrap_or(6);
            let tc = TrainConfig { seed: 5, epochs, bn_warmup_epochs: warmup, ..TrainConfig::default() };
            let out = train(&mut model, &train_set, &val_set, &tc).unwrap();
            if let Some(reason) = &out.aborted { println!("ABORTED: {reason}"); }
            let last = out.log.last().unwrap();
            println!("train done: box {:.3} obj {:.3} val mAP {:.3}", last.loss_box, last.loss_obj, last.map50);
            // weight magnitude audit
            let mut audit: std::collections::BTreeMap<String, f64> = Default::default();
            model.visit_params(&mut |name, t| {
                let group = name.split('.').next().unwrap_or("?").to_string();
                let m: f64 = t.values().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
                let e = audit.entry(group).or_insert(0.0);
                *e = e.max(m);
            });
            for (g, m) in &audit { print!("{g}:{m:.1} "); }
            println!();
            let trajectory: Vec<String> = out.log.iter().map(|r| format!("{:.2}", r.map50)).collect();
            println!("val mAP trajectory: {}", trajectory.join(" "));

            // infer-mode vs train-mode evaluation
            use msdet_core::metrics::{evaluate, nms, Detection};
            use msdet_core::model::decode;
            let layouts = model.head_layouts(96);
            let mut dets_infer: Vec<Vec<Detection>> = Vec::new();
            let mut dets_trainmode: Vec<Vec<Detection>> = Vec::new();
            let mut gts_all = Vec::new();
            for (img, gts) in &val_set {
                let input = image_to_tensor(img, 3);
                let preds = model.predict(&input).unwrap();
                let mut d = nms(&decode(&preds, 0.05).unwrap(), 0.5);
                d.truncate(300);
                dets_infer.push(d);

                // train-mode forward (batch statistics)
                let mut g = Graph::new();
                let mut b = Bindings::new();
                let x = g.constant(input.clone());
                let heads = model.forward(&mut g, x, &mut b, Mode::Train).unwrap();
                let preds_t: Vec<msdet_core::model::RawPrediction> = heads.iter().map(|h| msdet_core::model::RawPrediction {
                    tensor: g.value(h.node).clone(),
                    stride: h.stride,
                    anchors: layouts.iter().find(|l| l.stride == h.stride).unwrap().anchors.clone(),
                    num_classes: 1,
                }).collect();
                let mut d = nms(&decode(&preds_t, 0.05).unwrap(), 0.5);
                d.truncate(300);
                dets_trainmode.push(d);
                gts_all.push(gts.clone());
            }
            let m_inf = evaluate(&dets_infer, &gts_all, &[0.5]).unwrap();
            let m_tm = evaluate(&dets_trainmode, &gts_all, &[0.5]).unwrap();
            println!("infer-mode  mAP50 {:.3} P {:.3} R {:.3}", m_inf.map, m_inf.precision, m_inf.recall);
            println!("train-mode  mAP50 {:.3} P {:.3} R {:.3}", m_tm.map, m_tm.precision, m_tm.recall);
            for nms_t in [0.2, 0.3, 0.4] {
                let m = msdet_core::train::evaluate_model(&model, &val_set, &[0.5], 0.05, nms_t, 300).unwrap();
                println!("infer nms@{nms_t}: mAP50 {:.3} P {:.3} R {:.3}", m.map, m.precision, m.recall);
            }

            // coverage: fraction of GTs with any decoded det above IoU 0.5 (infer mode)
            let mut covered = 0usize; let mut total = 0usize;
            for (dets, gts) in dets_infer.iter().zip(&gts_all) {
                for gt in gts {
                    total += 1;
                    if dets.iter().any(|d| msdet_core::metrics::iou(&d.bbox, &gt.bbox) >= 0.5) { covered += 1; }
                }
            }
            println!("infer-mode GT coverage at IoU .5 (any conf): {covered}/{total}");

            // per-head mAP (infer mode)
            for (hi, stride) in [4usize, 8, 16].iter().enumerate() {
                let mut per: Vec<Vec<Detection>> = Vec::new();
                for (img, _) in &val_set {
                    let input = image_to_tensor(img, 3);
                    let preds = model.predict(&input).unwrap();
                    let mut d = nms(&decode(&preds[hi..hi+1], 0.05).unwrap(), 0.5);
                    d.truncate(300);
                    per.push(d);
                }
                let m = evaluate(&per, &gts_all, &[0.5]).unwrap();
                println!("head s{stride}: mAP50 {:.3} P {:.3} R {:.3}", m.map, m.precision, m.recall);
            }
        }
        other => eprintln!("unknown probe {other}"),
    }
}
