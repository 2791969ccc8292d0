use proptest::prelude::*;
use snn_core::autograd::{focal_loss_value, FocalConfig, Tape, Tensor};
use snn_core::detection::*;
use snn_core::encoding::{cubes_to_tensor, VoxelCube};
use snn_core::spiking::{build_detector, BlockStyle, DetectorBackbone, DetectorConfig, Network, OutputSpec};

fn anchor_strategy() -> impl Strategy<Value = Anchor> {
    (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0).prop_map(|(cx, cy, w, h)| Anchor { cx, cy, w, h })
}

fn box_strategy() -> impl Strategy<Value = BoxF> {
    (0.0f64..0.9, 0.0f64..0.9, 0.01f64..0.5, 0.01f64..0.5).prop_map(|(x, y, w, h)| BoxF::new(x, y, w, h))
}

fn det(image_id: u64, class_id: usize, score: f64, b: BoxF) -> Detection {
    Detection {
        image_id,
        class_id,
        score,
        bbox: b,
    }
}

#[test]
fn four_maps_give_linear_scales() {
    let cfg = AnchorConfig::new(vec![(8, 8), (4, 4), (2, 2), (1, 1)]);
    let s = anchor_scales(&cfg);
    for (a, b) in s.iter().zip([0.5, 0.6, 0.7, 0.8]) {
        assert!((a - b).abs() < 1e-12, "{s:?}");
    }
    assert!(s.windows(2).all(|w| w[1] > w[0]));
    let anchors = generate_anchors(&cfg).unwrap();
    assert_eq!(anchors.len(), (64 + 16 + 4 + 1) * 4);
    assert_eq!(anchors.len(), cfg.total_anchors());
    // Ratio-1 anchor of the first cell on map 0 is square with side 0.5.
    assert_eq!((anchors[0].w, anchors[0].h), (0.5, 0.5));
    assert_eq!((anchors[0].cx, anchors[0].cy), (1.0 / 16.0, 1.0 / 16.0));
    // Extra anchor is the geometric mean of neighbouring scales.
    assert!((anchors[3].w - (0.5f64 * 0.6).sqrt()).abs() < 1e-12);
}

#[test]
fn anchor_count_formula_with_per_map_ratios() {
    let cfg = AnchorConfig {
        feature_maps: vec![(3, 5), (2, 2)],
        scale_min: 0.2,
        scale_max: 0.9,
        aspect_ratios: vec![vec![1.0], vec![1.0, 2.0, 0.5, 3.0]],
    };
    assert_eq!(generate_anchors(&cfg).unwrap().len(), 15 * 2 + 4 * 5);
    let bad = AnchorConfig {
        aspect_ratios: vec![vec![1.0]; 3],
        ..cfg
    };
    assert!(generate_anchors(&bad).is_err());
}

#[test]
fn iou_of_offset_squares_is_one_seventh() {
    let a = BoxF::new(0.0, 0.0, 2.0, 2.0);
    let b = BoxF::new(1.0, 1.0, 2.0, 2.0);
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BoxF::new(2.0, 0.0, 1.0, 1.0)), 0.0);
}

#[test]
fn doubled_width_gives_log_two_term() {
    let a = Anchor {
        cx: 0.3,
        cy: 0.4,
        w: 0.1,
        h: 0.2,
    };
    let off = encode_box(&a, &BoxF::from_center(0.3, 0.4, 0.2, 0.2)).unwrap();
    assert!((off[2] - 2f64.ln() / 0.2).abs() < 1e-12);
    assert_eq!(off[3], 0.0);
    assert!(matches!(
        encode_box(&a, &BoxF::new(0.0, 0.0, -1.0, 1.0)),
        Err(DetectionError::NonPositiveSize { .. })
    ));
}

#[test]
fn extra_blocks_halve_with_conv_rounding() {
    // 3×3 stride 2 pad 1 maps n to (n - 1) / 2 + 1, so 3 becomes 2.
    assert_eq!(extra_block_sizes(16, 12, 3).unwrap(), vec![(8, 6), (4, 3), (2, 2)]);
    assert!(matches!(extra_block_sizes(2, 1, 1), Err(DetectionError::TooSmall { index: 0, .. })));
    assert!(extra_block_sizes(4, 4, 3).is_err());
}

#[test]
fn detector_extras_match_shape_arithmetic_and_parameter_formula() {
    let cfg = DetectorConfig {
        backbone: DetectorBackbone::Small {
            stages: vec![(8, 2), (16, 2)],
        },
        extras: vec![(8, 12), (6, 10), (4, 8)],
        anchors_per_cell: 4,
        num_classes: 2,
    };
    let spec = build_detector(&cfg, 4, BlockStyle::default()).unwrap();
    spec.audit_spike_purity().unwrap();
    let shapes = spec.infer_shapes(64, 48).unwrap();
    let OutputSpec::Detection { taps, .. } = &spec.output else { panic!() };
    let sizes: Vec<(usize, usize)> = taps.iter().map(|&t| (shapes[t].h, shapes[t].w)).collect();
    assert_eq!(sizes[1], (16, 12));
    assert_eq!(&sizes[2..], &extra_block_sizes(16, 12, 3).unwrap()[..]);

    let net = Network::new(spec, 0).unwrap();
    let count = |prefix: &str| -> usize {
        let p = net.params();
        p.ids()
            .filter(|&id| p.name(id).starts_with(prefix) && p.name(id).ends_with(".weight"))
            .map(|id| p.value(id).len())
            .sum()
    };
    // Cin·Cmid + Cmid·Cout·9 for the first extra block (Cin = 16).
    assert_eq!(count("extra1."), 16 * 8 + 8 * 12 * 9);
    assert_eq!(count("extra2."), 12 * 6 + 6 * 10 * 9);
}

#[test]
fn match_leaves_no_ground_truth_behind() {
    let cfg = AnchorConfig::new(vec![(4, 4), (2, 2), (1, 1)]);
    let anchors = generate_anchors(&cfg).unwrap();
    let gts: Vec<GtBox> = (0..6)
        .map(|i| GtBox {
            bbox: BoxF::new(0.1 * i as f64, 0.05 * i as f64, 0.05 + 0.02 * i as f64, 0.08),
            class_id: i % 2,
        })
        .collect();
    let m = match_anchors(&anchors, &gts, 0.5).unwrap();
    for g in 0..gts.len() {
        assert!(m.matched_gt.contains(&Some(g)), "gt {g} unmatched");
    }
    for (a, lbl) in m.labels.iter().enumerate() {
        match m.matched_gt[a] {
            Some(g) => assert_eq!(*lbl, gts[g].class_id + 1),
            None => assert_eq!(*lbl, 0),
        }
    }
    assert!(m.positives() >= gts.len());
}

#[test]
fn focal_loss_values() {
    assert!((focal_loss_value(0.9, 2.0, 1.0) - 0.01 * -(0.9f64.ln())).abs() < 1e-15);
    assert!((focal_loss_value(0.9, 2.0, 1.0) - 1.054e-3).abs() < 1e-6);
    assert!(focal_loss_value(1.0, 2.0, 0.25).abs() < 1e-15);
    let ps: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    let ls: Vec<f64> = ps.iter().map(|&p| focal_loss_value(p, 2.0, 0.25)).collect();
    assert!(ls.iter().all(|&l| l >= 0.0));
    assert!(ls.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn focal_with_zero_gamma_is_cross_entropy() {
    let logits = Tensor::new(vec![3, 3], vec![0.2, 1.5, -0.3, 2.0, 0.1, 0.4, -1.0, 0.0, 3.0]).unwrap();
    let labels = [1, 2, 2];
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(logits.clone(), false);
    let ce = tape.cross_entropy(x, &labels).unwrap();
    let x3 = tape.leaf(logits.reshape(&[1, 3, 3]).unwrap(), false);
    let fl = tape.focal_loss(x3, &labels, &FocalConfig { gamma: 0.0, alpha: 0.5 }).unwrap();
    // All rows are foreground, so the normaliser equals the row count.
    let (ce, fl) = (tape.value(ce).data()[0], tape.value(fl).data()[0]);
    assert!((fl - 0.5 * ce).abs() < 1e-12, "{fl} vs {ce}");
}

#[test]
fn smooth_l1_cases() {
    let mut tape = Tape::<f64>::new();
    let pred = tape.leaf(Tensor::new(vec![1, 2, 4], vec![0.5; 8]).unwrap(), true);
    let target = Tensor::zeros(&[1, 2, 4]);
    let l = tape.smooth_l1(pred, &target, &[true, false]).unwrap();
    assert!((tape.value(l).data()[0] - 4.0 * 0.125).abs() < 1e-15);
    let none = tape.smooth_l1(pred, &target, &[false, false]).unwrap();
    assert_eq!(tape.value(none).data()[0], 0.0);
    let same = tape.smooth_l1(pred, &Tensor::full(&[1, 2, 4], 0.5), &[true, true]).unwrap();
    assert_eq!(tape.value(same).data()[0], 0.0);
}

#[test]
fn time_sum_properties() {
    let a = vec![1.0f32, -2.0, 0.5];
    let b = vec![0.25f32, 4.0, -1.0];
    assert_eq!(sum_heads_over_time(std::slice::from_ref(&a)), a);
    let doubled: Vec<f32> = a.iter().map(|v| v * 2.0).collect();
    assert_eq!(sum_heads_over_time(&[a.clone(), a.clone()]), doubled);
    assert_eq!(sum_heads_over_time(&[a.clone(), b.clone()]), sum_heads_over_time(&[b, a]));
}

#[test]
fn nms_examples() {
    let b = BoxF::new(0.0, 0.0, 10.0, 10.0);
    let kept = nms(vec![det(0, 0, 0.8, b), det(0, 0, 0.9, b)], 0.5, 0.0, 10);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);
    let far = BoxF::new(50.0, 50.0, 10.0, 10.0);
    assert_eq!(nms(vec![det(0, 0, 0.9, b), det(0, 0, 0.8, far)], 0.5, 0.0, 10).len(), 2);
    // Other classes and other images are never suppressed.
    assert_eq!(nms(vec![det(0, 0, 0.9, b), det(0, 1, 0.8, b), det(1, 0, 0.7, b)], 0.5, 0.0, 10).len(), 3);
    assert!(nms(vec![det(0, 0, 0.01, b)], 0.5, 0.05, 10).is_empty());
}

#[test]
fn decoded_scores_are_probabilities() {
    let anchors = generate_anchors(&AnchorConfig::new(vec![(2, 2)])).unwrap();
    let a = anchors.len();
    let cls: Vec<f32> = (0..a * 3).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
    let reg = vec![0.0f32; a * 4];
    let cfg = PostprocessConfig {
        score_thresh: 0.0,
        ..Default::default()
    };
    let dets = decode_detections(3, &cls, &reg, &anchors, 64.0, 32.0, &cfg);
    assert!(!dets.is_empty());
    for d in &dets {
        assert!((0.0..=1.0).contains(&d.score));
        assert!(d.bbox.x >= 0.0 && d.bbox.x + d.bbox.w <= 64.0 + 1e-9);
        assert!(d.bbox.y >= 0.0 && d.bbox.y + d.bbox.h <= 32.0 + 1e-9);
        assert_eq!(d.image_id, 3);
    }
}

#[test]
fn dump_round_trip() {
    let dets = vec![
        det(1, 0, 0.75, BoxF::new(1.5, 2.0, 30.0, 12.25)),
        det(2, 1, 0.125, BoxF::new(0.0, 0.0, 5.0, 5.0)),
    ];
    let text = write_detections_text(&dets);
    assert_eq!(text.lines().count(), 2);
    assert_eq!(parse_detections_text(&text).unwrap(), dets);
    assert!(parse_detections_text("1 0 x 0 0 1 1").is_err());
    let json: serde_json::Value = serde_json::from_str(&write_coco_json(&dets)).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
}

fn toy_detector() -> (Network, Vec<Anchor>) {
    let cfg = DetectorConfig {
        backbone: DetectorBackbone::Small {
            stages: vec![(8, 2), (8, 2)],
        },
        extras: vec![(8, 8)],
        anchors_per_cell: 4,
        num_classes: 1,
    };
    let spec = build_detector(&cfg, 2, BlockStyle::default()).unwrap();
    let shapes = spec.infer_shapes(16, 16).unwrap();
    let OutputSpec::Detection { taps, .. } = &spec.output else { panic!() };
    let maps = taps.iter().map(|&t| (shapes[t].h, shapes[t].w)).collect();
    let anchors = generate_anchors(&AnchorConfig::new(maps)).unwrap();
    (Network::new(spec, 4).unwrap(), anchors)
}

fn toy_input() -> Tensor<f32> {
    let mut cube = VoxelCube::zeros(2, 3, 16, 16);
    for t in 0..3 {
        for y in 4..12 {
            for x in 3 + t..11 + t {
                cube.set(1, t, y, x);
            }
        }
    }
    cubes_to_tensor(&[&cube]).unwrap()
}

#[test]
fn gradient_reaches_the_backbone_through_spikes() {
    let (mut net, anchors) = toy_detector();
    // Strong first conv so that the backbone fires on the toy input.
    let w0 = net.param("stage0.conv", "weight").unwrap();
    for v in net.params_mut().value_mut(w0).data_mut() {
        *v = v.abs() * 3.0;
    }
    let gt = GtBox {
        bbox: BoxF::new(0.25, 0.25, 0.5, 0.5),
        class_id: 0,
    };
    let target = match_anchors(&anchors, &[gt], 0.5).unwrap();
    assert!(target.positives() >= 1);

    let mut tape = Tape::new();
    let out = net.forward_train(&mut tape, &toy_input(), 3).unwrap();
    assert!(out.record.total_spikes() > 0);
    let (loss, _, _) = detection_loss(&mut tape, out.cls.unwrap(), out.reg.unwrap(), &[target], &Default::default()).unwrap();
    assert!(tape.value(loss).data()[0].is_finite());
    tape.backward(loss).unwrap();
    net.accumulate_grads(&tape, &out);
    let g = net.params().grad(w0);
    assert!(g.iter().any(|v| *v != 0.0), "no gradient on the first backbone conv");
}

#[test]
fn empty_scene_loss_is_finite() {
    let (mut net, anchors) = toy_detector();
    let target = match_anchors(&anchors, &[], 0.5).unwrap();
    assert_eq!(target.positives(), 0);
    let mut tape = Tape::new();
    let out = net.forward_train(&mut tape, &toy_input(), 3).unwrap();
    let (loss, _, loc) = detection_loss(&mut tape, out.cls.unwrap(), out.reg.unwrap(), &[target], &Default::default()).unwrap();
    assert_eq!(tape.value(loc).data()[0], 0.0);
    assert!(tape.value(loss).data()[0].is_finite());
    tape.backward(loss).unwrap();
    net.accumulate_grads(&tape, &out);
    for id in net.params().ids() {
        assert!(net.params().grad(id).iter().all(|g| g.is_finite()));
    }
}

proptest! {
    #[test]
    fn decode_inverts_encode(a in anchor_strategy(), b in box_strategy()) {
        let back = decode_box(&a, &encode_box(&a, &b).unwrap());
        prop_assert!((back.x - b.x).abs() < 1e-6);
        prop_assert!((back.y - b.y).abs() < 1e-6);
        prop_assert!((back.w - b.w).abs() < 1e-6);
        prop_assert!((back.h - b.h).abs() < 1e-6);
    }

    #[test]
    fn every_ground_truth_is_matched(gts in prop::collection::vec((box_strategy(), 0usize..3), 0..8)) {
        let anchors = generate_anchors(&AnchorConfig::new(vec![(3, 3), (1, 1)])).unwrap();
        let gts: Vec<GtBox> = gts.into_iter().map(|(bbox, class_id)| GtBox { bbox, class_id }).collect();
        let m = match_anchors(&anchors, &gts, 0.5).unwrap();
        // Fewer anchors than boxes cannot happen here (40 anchors, ≤ 7 boxes).
        for g in 0..gts.len() {
            prop_assert!(m.matched_gt.contains(&Some(g)));
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in box_strategy(), b in box_strategy()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
    }
}
