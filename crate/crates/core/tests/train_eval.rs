//! Training machinery: assignment vs the independent oracle, loss
//! semantics, SGD arithmetic, loop determinism, and evaluator invariants.

use msdet_core::data::{generate_scene, SceneSpec};
use msdet_core::metrics::{evaluate, iou, nms, BBox, Detection, GroundTruth};
use msdet_core::model::{HeadLayout, ModelConfig, MsDetModel};
use msdet_core::oracle;
use msdet_core::tensor::gradcheck::check_op;
use msdet_core::tensor::{Graph, Tensor};
use msdet_core::train::{
    assign_targets, detection_loss, log_to_csv, sgd_step, train, DetectionLossOp, TrainConfig,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;
use std::rc::Rc;

fn layouts_96() -> Vec<HeadLayout> {
    let cfg = ModelConfig::desk();
    [4usize, 8, 16]
        .iter()
        .map(|&stride| HeadLayout {
            stride,
            grid: 96 / stride,
            anchors: cfg.anchors_for(stride),
            num_classes: 1,
        })
        .collect()
}

#[test]
fn sgd_single_and_double_step_arithmetic() {
    let mut p = vec![0.0];
    let mut v = vec![0.0];
    sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0);
    assert_eq!(p, vec![-0.1]);

    let mut p = vec![0.0];
    let mut v = vec![0.0];
    sgd_step(&mut p, &[1.0], &mut v, 0.01, 0.937);
    assert_eq!(v, vec![1.0]);
    assert!((p[0] - -0.01).abs() < 1e-15);
    sgd_step(&mut p, &[1.0], &mut v, 0.01, 0.937);
    assert!((v[0] - 1.937).abs() < 1e-15);
    assert!((p[0] - -0.02937).abs() < 1e-15);
}

#[test]
fn sgd_zero_gradient_only_fixed_with_zero_velocity() {
    let mut p = vec![2.0];
    let mut v = vec![0.0];
    sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.9);
    assert_eq!(p, vec![2.0]);

    let mut v = vec![1.0];
    sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.9);
    assert!(p[0] != 2.0, "momentum keeps moving the parameter");
}

#[test]
fn sgd_momentum_zero_is_vanilla_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grads: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut p = vec![0.5; 10];
    let mut v = vec![0.0; 10];
    sgd_step(&mut p, &grads, &mut v, 0.05, 0.0);
    for ((pv, g), orig) in p.iter().zip(&grads).zip(std::iter::repeat(0.5)) {
        assert_eq!(*pv, orig - 0.05 * g);
    }
}

#[test]
fn single_centered_box_gets_one_positive_per_admissible_head() {
    let layouts = layouts_96();
    let gt = GroundTruth {
        bbox: BBox::new(0.5, 0.5, 10.0 / 96.0, 10.0 / 96.0).unwrap(),
        class: 0,
    };
    let targets = assign_targets(&[gt], &layouts, 96);
    // 10px box: stride-4 anchors {4,8,16} ratios {2.5, 1.25, 1.6} all <= 4;
    // stride-8 anchors {8,16,32}: ratios {1.25, 1.6, 3.2}; stride-16
    // anchors {16,32,64}: 64/10 = 6.4 > 4 but 16 and 32 admit.
    for t in &targets {
        assert_eq!(t.positives.len(), 1, "stride {}", t.layout.stride);
        let ones = t.obj.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 1);
    }
}

#[test]
fn empty_ground_truth_gives_all_zero_objectness() {
    let targets = assign_targets(&[], &layouts_96(), 96);
    for t in &targets {
        assert!(t.positives.is_empty());
        assert!(t.obj.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn tiny_box_is_never_dropped() {
    // 1px box: ratio to the smallest anchor (4px) is 4... use 0.5px to
    // exceed every ratio bound; the global fallback must still assign it.
    let layouts = layouts_96();
    let gt = GroundTruth {
        bbox: BBox::new(0.31, 0.64, 0.5 / 96.0, 0.5 / 96.0).unwrap(),
        class: 0,
    };
    let targets = assign_targets(&[gt], &layouts, 96);
    let total: usize = targets.iter().map(|t| t.positives.len()).sum();
    assert_eq!(total, 1);
    // the fallback picks the best shape match: the smallest anchor overall
    assert_eq!(targets[0].positives.len(), 1);
    assert_eq!(targets[0].positives[0].anchor, 0);
}

#[test]
fn assignment_matches_independent_oracle_on_random_scenes() {
    let layouts = layouts_96();
    for seed in 0..60u64 {
        let sample = generate_scene(&SceneSpec::desk(seed)).unwrap();
        let targets = assign_targets(&sample.boxes, &layouts, 96);
        let want = oracle::assignment_counts_direct(&sample.boxes, &layouts, 96);
        for (t, w) in targets.iter().zip(&want) {
            let got: Vec<(usize, usize, usize)> =
                t.positives.iter().map(|p| (p.anchor, p.gy, p.gx)).collect();
            assert_eq!(got, *w, "stride {}", t.layout.stride);
        }
    }
}

/// A 1x1-grid single-anchor head for loss unit tests.
fn toy_layout() -> HeadLayout {
    HeadLayout {
        stride: 4,
        grid: 1,
        anchors: vec![(4.0, 4.0)],
        num_classes: 1,
    }
}

#[test]
fn perfect_predictions_reach_the_loss_floor() {
    use msdet_core::model::encode_box;
    let layout = toy_layout();
    let gt = BBox::new(0.5, 0.5, 0.75, 0.75).unwrap(); // 3px box on a 4px image
    let (tx, ty, tw, th) = encode_box(&gt, 0, 0, (4.0, 4.0), 4, 4).unwrap();
    let head = Tensor::new(vec![6, 1, 1], vec![tx, ty, tw, th, 30.0, 0.0]).unwrap();

    let targets = assign_targets(
        &[GroundTruth { bbox: gt, class: 0 }],
        std::slice::from_ref(&layout),
        4,
    );
    let op = DetectionLossOp {
        targets,
        lambda_box: 5.0,
        lambda_obj: 1.0,
        parts: Cell::new((0.0, 0.0)),
    };
    use msdet_core::tensor::CustomOp;
    let loss = op.forward(&[&head]).unwrap();
    let (box_term, obj_term) = op.parts.get();
    assert!(box_term < 1e-12, "IoU 1 -> zero box loss, got {box_term}");
    assert!(obj_term < 1e-3, "saturated objectness, got {obj_term}");
    assert!(loss.values()[0] >= 0.0);
}

#[test]
fn zero_positives_reduce_to_pure_objectness_bce() {
    let layout = toy_layout();
    let head = Tensor::new(vec![6, 1, 1], vec![0.3, -0.4, 0.1, 0.2, 0.7, -0.9]).unwrap();
    let targets = assign_targets(&[], std::slice::from_ref(&layout), 4);
    let op = DetectionLossOp {
        targets,
        lambda_box: 5.0,
        lambda_obj: 1.0,
        parts: Cell::new((0.0, 0.0)),
    };
    use msdet_core::tensor::CustomOp;
    let loss = op.forward(&[&head]).unwrap().values()[0];
    // single slot, target 0: bce = ln(1 + e^l) at l = 0.7
    let want = (1.0 + 0.7f64.exp()).ln();
    assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    let (box_term, _) = op.parts.get();
    assert_eq!(box_term, 0.0);
}

#[test]
fn toy_head_loss_gradcheck() {
    let layout = toy_layout();
    let gt = GroundTruth {
        bbox: BBox::new(0.55, 0.45, 0.6, 0.5).unwrap(),
        class: 0,
    };
    let targets = assign_targets(&[gt], std::slice::from_ref(&layout), 4);
    let head = Tensor::new(vec![6, 1, 1], vec![0.2, -0.3, 0.15, -0.1, 0.4, 0.6]).unwrap();
    let report = check_op(
        "toy head loss",
        move |g, xs| {
            let op = Rc::new(DetectionLossOp {
                targets: targets.clone(),
                lambda_box: 5.0,
                lambda_obj: 1.0,
                parts: Cell::new((0.0, 0.0)),
            });
            g.apply_custom(op, &[xs[0]])
        },
        std::slice::from_ref(&head),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn loss_is_nonnegative_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layouts = layouts_96();
    for seed in 100..130u64 {
        let sample = generate_scene(&SceneSpec::desk(seed)).unwrap();
        let targets = assign_targets(&sample.boxes, &layouts, 96);
        let heads: Vec<Tensor> = layouts
            .iter()
            .map(|l| Tensor::randn(&[l.anchors.len() * 6, l.grid, l.grid], 2.0, &mut rng))
            .collect();
        let op = DetectionLossOp {
            targets,
            lambda_box: 5.0,
            lambda_obj: 1.0,
            parts: Cell::new((0.0, 0.0)),
        };
        use msdet_core::tensor::CustomOp;
        let refs: Vec<&Tensor> = heads.iter().collect();
        let loss = op.forward(&refs).unwrap().values()[0];
        assert!(loss >= 0.0);
    }
}

#[test]
fn loss_rejects_non_finite_heads() {
    let layout = toy_layout();
    let head = Tensor::new(vec![6, 1, 1], vec![0.0, 0.0, 0.0, 0.0, f64::INFINITY, 0.0]).unwrap();
    let targets = assign_targets(&[], std::slice::from_ref(&layout), 4);
    let mut g = Graph::new();
    let h = g.constant(head);
    let heads = vec![msdet_core::model::HeadNode { node: h, stride: 4 }];
    // infinity * 0 obj bce path: max(l,0) - l*0 + ln(1+e^-inf) = inf
    assert!(detection_loss(&mut g, &heads, targets, 5.0, 1.0).is_err());
}

#[test]
fn nms_matches_exhaustive_oracle_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let n = rng.gen_range(0..20);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                bbox: BBox::new(
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.05..0.3),
                )
                .unwrap(),
                confidence: rng.gen_range(0.0..1.0),
                class: rng.gen_range(0..2),
            })
            .collect();
        let thr = rng.gen_range(0.1..0.9);
        assert_eq!(nms(&dets, thr), oracle::nms_exhaustive(&dets, thr));
    }
}

#[test]
fn nms_is_input_order_invariant_with_distinct_confidences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dets: Vec<Detection> = (0..12)
        .map(|i| Detection {
            bbox: BBox::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
            )
            .unwrap(),
            confidence: 0.05 * i as f64 + 0.01,
            class: 0,
        })
        .collect();
    let a = nms(&dets, 0.45);
    let mut shuffled = dets.clone();
    shuffled.reverse();
    let b = nms(&shuffled, 0.45);
    assert_eq!(a, b);
}

#[test]
fn evaluate_matches_brute_force_ap_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let images = rng.gen_range(1..5);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..images {
            let nd = rng.gen_range(0..6);
            let ng = rng.gen_range(0..6);
            dets.push(
                (0..nd)
                    .map(|_| Detection {
                        bbox: BBox::new(
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.05..0.3),
                            rng.gen_range(0.05..0.3),
                        )
                        .unwrap(),
                        confidence: rng.gen_range(0.0..1.0),
                        class: 0,
                    })
                    .collect::<Vec<_>>(),
            );
            gts.push(
                (0..ng)
                    .map(|_| GroundTruth {
                        bbox: BBox::new(
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.05..0.3),
                            rng.gen_range(0.05..0.3),
                        )
                        .unwrap(),
                        class: 0,
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let got = evaluate(&dets, &gts, &[0.5]).unwrap().ap_at(0.5).unwrap();
        let want = oracle::average_precision_direct(&dets, &gts, 0.5);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn evaluate_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mk_box = |rng: &mut ChaCha8Rng| {
        BBox::new(
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.05..0.3),
            rng.gen_range(0.05..0.3),
        )
        .unwrap()
    };
    let mut dets: Vec<Vec<Detection>> = Vec::new();
    let mut gts: Vec<Vec<GroundTruth>> = Vec::new();
    let mut conf = 0.97;
    for _ in 0..4 {
        dets.push(
            (0..4)
                .map(|_| {
                    conf -= 0.03; // all confidences distinct
                    Detection { bbox: mk_box(&mut rng), confidence: conf, class: 0 }
                })
                .collect(),
        );
        gts.push((0..3).map(|_| GroundTruth { bbox: mk_box(&mut rng), class: 0 }).collect());
    }
    let base = evaluate(&dets, &gts, &[0.5, 0.75]).unwrap();

    // permute image order
    let perm = [2usize, 0, 3, 1];
    let dets_p: Vec<_> = perm.iter().map(|&i| dets[i].clone()).collect();
    let gts_p: Vec<_> = perm.iter().map(|&i| gts[i].clone()).collect();
    let permuted = evaluate(&dets_p, &gts_p, &[0.5, 0.75]).unwrap();
    assert_eq!(base.map, permuted.map);
    assert_eq!(base.precision, permuted.precision);

    // permute detections within an image
    let mut dets_r = dets.clone();
    dets_r[1].reverse();
    let reordered = evaluate(&dets_r, &gts, &[0.5, 0.75]).unwrap();
    assert_eq!(base.map, reordered.map);
}

#[test]
fn ap_is_monotone_in_added_true_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let gt_box = BBox::new(
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.1..0.25),
            rng.gen_range(0.1..0.25),
        )
        .unwrap();
        let extra_gt = GroundTruth {
            bbox: BBox::new(0.85, 0.85, 0.1, 0.1).unwrap(),
            class: 0,
        };
        let dets: Vec<Detection> = (0..5)
            .map(|i| Detection {
                bbox: BBox::new(
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.05..0.2),
                    rng.gen_range(0.05..0.2),
                )
                .unwrap(),
                confidence: 0.6 - 0.05 * i as f64,
                class: 0,
            })
            .collect();
        let gts = vec![vec![GroundTruth { bbox: gt_box, class: 0 }, extra_gt]];
        let before = evaluate(&[dets.clone()], &gts, &[0.5]).unwrap().map;
        // add a perfect detection of the extra GT above every existing conf
        let mut more = dets;
        more.push(Detection { bbox: extra_gt.bbox, confidence: 0.99, class: 0 });
        let after = evaluate(&[more], &gts, &[0.5]).unwrap().map;
        assert!(after >= before - 1e-12, "{after} < {before}");
    }
}

fn tiny_dataset(n: usize, size: usize, base_seed: u64) -> Vec<(msdet_core::data::Plane<u8>, Vec<GroundTruth>)> {
    (0..n)
        .map(|i| {
            let mut spec = SceneSpec::desk(base_seed + i as u64);
            spec.size = size;
            spec.nodule_count = (1, 2);
            spec.nodule_radius = (2.0, 4.0);
            let s = generate_scene(&spec).unwrap();
            (s.image, s.boxes)
        })
        .collect()
}

fn tiny_model(seed: u64) -> MsDetModel {
    let mut cfg = ModelConfig::desk();
    cfg.input_size = 32;
    cfg.widths = [4, 8, 12, 16];
    cfg.erd_units = 1;
    MsDetModel::new(cfg, seed).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let mut model = tiny_model(50);
    let before = model.state_entries();
    let data = tiny_dataset(4, 32, 900);
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 1,
        batch_size: 2,
        augment: false,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &data, &[], &cfg).unwrap();
    assert!(out.aborted.is_none());
    let after = model.state_entries();
    for ((na, ta), (nb, tb)) in before.iter().zip(&after) {
        assert_eq!(na, nb);
        if na.contains("running_") {
            continue; // batchnorm running stats update regardless of lr
        }
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb), "{na}");
    }
}

#[test]
fn same_seed_training_is_bit_identical() {
    let data = tiny_dataset(6, 32, 901);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = tiny_model(51);
        let out = train(&mut model, &data, &data[..2], &cfg).unwrap();
        (model.state_entries(), log_to_csv(&out.log))
    };
    let (s1, csv1) = run();
    let (s2, csv2) = run();
    assert_eq!(csv1, csv2);
    for ((na, ta), (nb, tb)) in s1.iter().zip(&s2) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb), "{na}");
    }
}

#[test]
fn log_csv_has_pinned_header() {
    let csv = log_to_csv(&[]);
    assert_eq!(csv, "epoch,loss_box,loss_obj,precision,recall,map50\n");
}
