//! Static analyzer: resolution arithmetic, composed receptive fields against
//! the live-network impulse oracle, symbolic shape traces, and the collapse
//! warning.

use msdet_core::arch::{compose_rf, layer_resolution, trace_shapes, ArchConfig, LayerSpec, TracedLayer};
use msdet_core::model::ModelConfig;
use msdet_core::tensor::{Graph, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn layer_resolution_worked_examples() {
    let conv = LayerSpec::Conv { k: 3, s: 2, p: 1, r: 1 };
    assert_eq!(layer_resolution(640, &conv).unwrap(), 320);

    let up = LayerSpec::Upsample { f: 2 };
    assert_eq!(layer_resolution(160, &up).unwrap(), 320);

    let wide = LayerSpec::Conv { k: 3, s: 1, p: 0, r: 5 }; // footprint 11
    assert!(layer_resolution(5, &wide).is_err());
}

#[test]
fn compose_rf_single_dilated_layer() {
    let mut cfg = ArchConfig::new(32, 1);
    cfg.layers.push(TracedLayer::new(LayerSpec::Conv { k: 3, s: 1, p: 3, r: 3 }));
    let report = compose_rf(&cfg).unwrap();
    assert_eq!(report.final_rf(), 7);
}

#[test]
fn five_stride2_layers_collapse_a_20px_target() {
    let mut cfg = ArchConfig::new(640, 3);
    cfg.target_size = Some(20.0);
    for _ in 0..5 {
        cfg.layers.push(TracedLayer::new(LayerSpec::Conv { k: 3, s: 2, p: 1, r: 1 }));
    }
    let report = compose_rf(&cfg).unwrap();
    assert_eq!(report.rows.last().unwrap().jump, 32.0);
    assert!(
        report.warnings.iter().any(|w| w.contains("collapses below one cell")),
        "{:?}",
        report.warnings
    );
}

/// Composed receptive field must equal the measured width of the nonzero
/// gradient footprint of one output pixel, on a live network with random
/// positive weights.
fn impulse_footprint(stack: &[(usize, usize)], rng: &mut ChaCha8Rng) -> usize {
    // (kernel, dilation) pairs, stride 1, no activation
    let rf_bound: usize = 1 + stack.iter().map(|&(k, r)| (r * (k - 1))).sum::<usize>();
    let n = rf_bound + 8 + (rf_bound % 2);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[1, n, n], 0.1).requires_grad());
    let mut cur = x;
    let mut h = n;
    for &(k, r) in stack {
        let mut w = Tensor::randn(&[1, 1, k, k], 1.0, rng);
        for v in w.values_mut() {
            *v = v.abs() + 0.05;
        }
        let wn = g.constant(w);
        cur = g.conv2d(cur, wn, None, 1, 0, r).unwrap();
        h = (h - ((r * (k - 1)) + 1)) + 1;
    }
    let mut mask = Tensor::zeros(&[1, h, h]);
    let mid = h / 2;
    mask.values_mut()[mid * h + mid] = 1.0;
    let mn = g.constant(mask);
    let sel = g.mul(cur, mn).unwrap();
    let s = g.sum(sel);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    let (mut lo, mut hi) = (usize::MAX, 0);
    for y in 0..n {
        for xx in 0..n {
            if grad[y * n + xx] != 0.0 {
                lo = lo.min(xx);
                hi = hi.max(xx);
            }
        }
    }
    hi - lo + 1
}

#[test]
fn composed_rf_equals_impulse_footprint_for_sample_stacks() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let stacks: Vec<Vec<(usize, usize)>> = vec![
        vec![(3, 1), (3, 1), (3, 1)],
        vec![(3, 1), (3, 2), (3, 5)],
        vec![(3, 3)],
        vec![(3, 5), (3, 1)],
        vec![(3, 2), (3, 2), (3, 2), (3, 2)],
    ];
    for stack in stacks {
        let mut cfg = ArchConfig::new(64, 1);
        for &(k, r) in &stack {
            cfg.layers.push(TracedLayer::new(LayerSpec::Conv { k, s: 1, p: 0, r }));
        }
        let report = compose_rf(&cfg).unwrap();
        let measured = impulse_footprint(&stack, &mut rng);
        assert_eq!(report.final_rf(), measured, "stack {stack:?}");
    }
}

#[test]
fn trace_empty_layer_list_returns_input() {
    let cfg = ArchConfig::new(96, 3);
    let table = trace_shapes(&cfg).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].size, 96);
    assert_eq!(table.rows[0].channels, 3);
}

#[test]
fn paper640_trace_reproduces_published_shapes() {
    let cfg = ModelConfig::paper640();
    let arch = cfg.to_arch_config();
    let table = trace_shapes(&arch).unwrap();

    // F1: stride-8 tap, 80x80x128
    assert_eq!(table.tap("f1"), Some((80, 128)));
    // F2: stride-4 tap, 160x160x64
    assert_eq!(table.tap("f2"), Some((160, 64)));

    let dims: Vec<String> = table.rows.iter().map(|r| r.dims()).collect();
    assert!(dims.iter().any(|d| d == "80x80x64"), "F1' row: {dims:?}");
    assert!(dims.iter().any(|d| d == "160x160x64"), "upsampled row");
    assert!(dims.iter().any(|d| d == "160x160x18"), "F4 row");

    // rendered table carries the acceptance string verbatim
    assert!(table.to_table().contains("160x160x18"));
}

#[test]
fn desk_trace_at_64_has_16x16_stride4_grid() {
    let mut cfg = ModelConfig::desk();
    cfg.input_size = 64;
    let table = trace_shapes(&cfg.to_arch_config()).unwrap();
    let f4 = table
        .rows
        .iter()
        .find(|r| r.path.contains("w2 (F4)"))
        .expect("todb output row");
    assert_eq!(f4.size, 16);
    assert_eq!(f4.channels, 18);
}

#[test]
fn rf_report_csv_has_pinned_columns() {
    let cfg = ModelConfig::desk().to_arch_config();
    let report = compose_rf(&cfg).unwrap();
    let csv = report.to_csv();
    assert!(csv.starts_with("idx,kind,k,s,p,r,H,rf_layer,rf_composed,jump\n"));
    assert_eq!(csv.lines().count(), cfg.layers.len() + 1);
}

#[test]
fn inexact_division_yields_warning_not_error() {
    let mut cfg = ArchConfig::new(7, 1);
    cfg.layers.push(TracedLayer::new(LayerSpec::Conv { k: 2, s: 2, p: 0, r: 1 }));
    let report = compose_rf(&cfg).unwrap();
    assert_eq!(report.rows[0].resolution, 3);
    assert!(report.warnings.iter().any(|w| w.contains("inexactly")));
}

#[test]
fn random_legal_specs_agree_with_conv_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 1000 {
        let h = rng.gen_range(3..48);
        let k = [1usize, 2, 3, 5][rng.gen_range(0..4)];
        let s = rng.gen_range(1..4);
        let p = rng.gen_range(0..3);
        let r = rng.gen_range(1..4);
        let spec = LayerSpec::Conv { k, s, p, r };
        let Ok(pred) = layer_resolution(h, &spec) else { continue };
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, h, h]));
        let w = g.constant(Tensor::zeros(&[1, 1, k, k]));
        let y = g.conv2d(x, w, None, s, p, r).unwrap();
        assert_eq!(g.value(y).shape()[1], pred);
        checked += 1;
    }
}

#[test]
fn model_config_parse_round_trip_and_unknown_key() {
    let cfg = ModelConfig::desk();
    let text = cfg.serialize();
    let back = ModelConfig::parse(&text, "inline").unwrap();
    assert_eq!(back, cfg);

    let err = ModelConfig::parse("bogus_key 3\n", "inline").unwrap_err();
    assert!(err.to_string().contains("unknown key"), "{err}");

    let overridden = ModelConfig::parse("profile paper-640\ninput_size 320\n", "inline").unwrap();
    assert_eq!(overridden.widths, [32, 64, 128, 256]);
    assert_eq!(overridden.input_size, 320);
}
