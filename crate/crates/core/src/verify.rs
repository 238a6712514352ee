//! The registered gradient checks: every differentiable op and block in the
//! crate, validated against central finite differences at f64 step 1e-5 and
//! relative tolerance 1e-4. Both the CLI's `gradcheck` subcommand and the
//! acceptance suite run this registry.

use std::cell::Cell;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::erd::ErdBlock;
use crate::metrics::{BBox, GroundTruth};
use crate::model::{HeadLayout, ModelConfig, MsDetModel, TodbBranch};
use crate::nn::{Activation, CbsBlock, Mode, SppBlock};
use crate::pcam::{PcamBlock, PcamFusion};
use crate::tensor::gradcheck::{check_bound, check_op, GradCheckReport, DEFAULT_STEP, DEFAULT_TOL};
use crate::tensor::Tensor;
use crate::train::{assign_targets, DetectionLossOp};
use crate::Result;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

type Check = (String, Box<dyn FnOnce() -> Result<GradCheckReport>>);

fn registry() -> Vec<Check> {
    let step = DEFAULT_STEP;
    let tol = DEFAULT_TOL;
    let mut checks: Vec<Check> = Vec::new();
    let mut add = |name: &str, f: Box<dyn FnOnce() -> Result<GradCheckReport>>| {
        checks.push((name.to_string(), f));
    };

    for op in ["add", "sub", "mul", "silu", "leaky_relu", "sigmoid"] {
        let name = format!("elementwise {op}");
        add(
            &name.clone(),
            Box::new(move || {
                let a = randn(&[2, 3], 1);
                let b = randn(&[2, 3], 2);
                check_op(
                    &name,
                    |g, xs| match op {
                        "add" => g.add(xs[0], xs[1]),
                        "sub" => g.sub(xs[0], xs[1]),
                        "mul" => g.mul(xs[0], xs[1]),
                        "silu" => Ok(g.silu(xs[0])),
                        "leaky_relu" => Ok(g.leaky_relu(xs[0], 0.1)),
                        _ => Ok(g.sigmoid(xs[0])),
                    },
                    &[a, b],
                    step,
                    tol,
                )
            }),
        );
    }

    add(
        "matmul",
        Box::new(move || {
            check_op(
                "matmul",
                |g, xs| g.matmul(xs[0], xs[1]),
                &[randn(&[3, 4], 3), randn(&[4, 2], 4)],
                step,
                tol,
            )
        }),
    );

    add(
        "softmax_rows",
        Box::new(move || {
            check_op(
                "softmax_rows",
                |g, xs| {
                    let y = g.softmax_rows(xs[0])?;
                    let w = g.constant(Tensor::new(
                        vec![3, 5],
                        (0..15).map(|i| (i as f64).sin() + 1.5).collect(),
                    )?);
                    g.mul(y, w)
                },
                &[randn(&[3, 5], 5)],
                step,
                tol,
            )
        }),
    );

    for r in [1usize, 2, 3, 5] {
        let name = format!("conv2d r={r}");
        add(
            &name.clone(),
            Box::new(move || {
                let x = randn(&[2, 13, 13], 10 + r as u64);
                let w = randn(&[2, 2, 3, 3], 20 + r as u64);
                let bias = randn(&[2], 30 + r as u64);
                check_op(
                    &name,
                    |g, xs| g.conv2d(xs[0], xs[1], Some(xs[2]), 1, r, r),
                    &[x, w, bias],
                    step,
                    tol,
                )
            }),
        );
    }

    add(
        "maxpool",
        Box::new(move || {
            check_op(
                "maxpool",
                |g, xs| g.maxpool2d(xs[0], 2, 2, 0),
                &[randn(&[2, 6, 6], 40)],
                step,
                tol,
            )
        }),
    );
    add(
        "upsample",
        Box::new(move || {
            check_op(
                "upsample",
                |g, xs| g.upsample_nearest(xs[0], 2),
                &[randn(&[2, 4, 4], 41)],
                step,
                tol,
            )
        }),
    );
    for mode in ["train", "infer"] {
        let name = format!("batchnorm {mode}");
        add(
            &name.clone(),
            Box::new(move || {
                let inputs = [randn(&[2, 4, 4], 42), randn(&[2], 43), randn(&[2], 44)];
                let running = ([0.2, -0.1], [1.1, 0.8]);
                check_op(
                    &name,
                    |g, xs| {
                        let run = (mode == "infer").then_some((&running.0[..], &running.1[..]));
                        g.batchnorm2d(xs[0], xs[1], xs[2], run, 1e-5)
                    },
                    &inputs,
                    step,
                    tol,
                )
            }),
        );
    }

    add(
        "cbs stack",
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(50);
            let c1 = CbsBlock::new("c1", 2, 3, 3, 2, 1, &mut rng);
            let c2 = CbsBlock::new("c2", 3, 2, 3, 1, 1, &mut rng);
            check_bound(
                "cbs stack",
                |g, x, b| {
                    let y = c1.forward(g, x, b, Mode::Train)?;
                    c2.forward(g, y, b, Mode::Train)
                },
                &randn(&[2, 6, 6], 51),
                step,
                tol,
            )
        }),
    );
    add(
        "spp",
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(52);
            let spp = SppBlock::new("spp", 4, 4, [3, 5, 7], &mut rng)?;
            check_bound(
                "spp",
                |g, x, b| spp.forward(g, x, b, Mode::Train),
                &randn(&[4, 7, 7], 53),
                step,
                tol,
            )
        }),
    );
    add(
        "erd",
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(54);
            let erd = ErdBlock::new("erd", 2, &[1, 3, 5], &mut rng)?;
            check_bound(
                "erd",
                |g, x, b| erd.forward(g, x, b, Mode::Train),
                &randn(&[2, 6, 6], 55),
                step,
                tol,
            )
        }),
    );

    for branch in ["position", "channel", "fused"] {
        let name = format!("{branch} attention (incl beta/gamma)");
        add(
            &name.clone(),
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(56);
                let mut pcam = PcamBlock::new("pcam.0", 3, PcamFusion::Sum, &mut rng);
                pcam.beta.values_mut()[0] = 0.3;
                pcam.gamma.values_mut()[0] = -0.2;
                let input = randn(&[3, 3, 3], 57);
                check_bound(
                    &name,
                    |g, x, b| match branch {
                        "position" => pcam.position_attention(g, x, b),
                        "channel" => pcam.channel_attention(g, x, b),
                        _ => pcam.forward(g, x, b),
                    },
                    &input,
                    step,
                    tol,
                )
            }),
        );
    }

    for activation in [Activation::Silu, Activation::LeakyRelu(0.1)] {
        let name = format!("todb ({})", activation.name());
        add(
            &name.clone(),
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(58);
                let todb = TodbBranch::new(6, 4, 12, activation, &mut rng);
                let f2 = randn(&[4, 8, 8], 59);
                check_bound(
                    &name,
                    |g, f1, b| {
                        let f2n = g.constant(f2.clone());
                        todb.forward(g, f1, f2n, b)
                    },
                    &randn(&[6, 4, 4], 60),
                    step,
                    tol,
                )
            }),
        );
    }

    add(
        "detection loss (toy head)",
        Box::new(move || {
            let layout = HeadLayout {
                stride: 4,
                grid: 1,
                anchors: vec![(4.0, 4.0)],
                num_classes: 1,
            };
            let gt = GroundTruth { bbox: BBox::new(0.55, 0.45, 0.6, 0.5)?, class: 0 };
            let targets = assign_targets(&[gt], std::slice::from_ref(&layout), 4);
            let head = Tensor::new(vec![6, 1, 1], vec![0.2, -0.3, 0.15, -0.1, 0.4, 0.6])?;
            check_op(
                "detection loss (toy head)",
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
                step,
                tol,
            )
        }),
    );

    add(
        "full desk model loss (narrow widths)",
        Box::new(move || {
            // Full architecture, narrowed so central differences over every
            // coordinate stay fast; op mix matches the desk profile.
            let mut cfg = ModelConfig::desk();
            cfg.input_size = 32;
            cfg.widths = [4, 8, 12, 16];
            let model = MsDetModel::new(cfg, 61)?;
            let gts = vec![
                GroundTruth { bbox: BBox::new(0.40, 0.35, 0.15, 0.2)?, class: 0 },
                GroundTruth { bbox: BBox::new(0.7, 0.72, 0.3, 0.28)?, class: 0 },
            ];
            let layouts = model.head_layouts(32);
            let input = {
                let mut rng = ChaCha8Rng::seed_from_u64(62);
                Tensor::randn(&[3, 32, 32], 0.5, &mut rng)
            };
            check_bound(
                "full desk model loss (narrow widths)",
                |g, x, b| {
                    let heads = model.forward(g, x, b, Mode::Train)?;
                    let targets = assign_targets(&gts, &layouts, 32);
                    let op = Rc::new(DetectionLossOp {
                        targets,
                        lambda_box: 5.0,
                        lambda_obj: 1.0,
                        parts: Cell::new((0.0, 0.0)),
                    });
                    let inputs: Vec<_> = heads.iter().map(|h| h.node).collect();
                    g.apply_custom(op, &inputs)
                },
                &input,
                step,
                tol,
            )
        }),
    );

    checks
}

/// Names of every registered check, in execution order.
pub fn registered_checks() -> Vec<String> {
    registry().into_iter().map(|(name, _)| name).collect()
}

/// Run every registered check whose name contains `filter` (all when None).
pub fn run_gradient_suite(filter: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (name, f) in registry() {
        if filter.is_none_or(|needle| name.contains(needle)) {
            reports.push(f()?);
        }
    }
    Ok(reports)
}
