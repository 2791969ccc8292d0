mod common;

use common::oracles::map_oracle;
use common::structural::{fusion_pair, patchy_cube};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snn_core::detection::{BoxF, Detection};
use snn_core::metrics::*;
use snn_core::spiking::*;

fn gt(image_id: u64, class_id: usize, bbox: BoxF) -> GroundTruth {
    GroundTruth { image_id, class_id, bbox }
}

fn det(image_id: u64, class_id: usize, score: f64, bbox: BoxF) -> Detection {
    Detection {
        image_id,
        class_id,
        score,
        bbox,
    }
}

/// Up to five ground-truth boxes over a few images and two classes, with
/// detections jittered around them plus some clutter.
fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = rng.gen_range(1..4u64);
    let n_gt = rng.gen_range(0..6);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| {
            let b = BoxF::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(4.0..20.0), rng.gen_range(4.0..20.0));
            gt(rng.gen_range(0..images), rng.gen_range(0..2), b)
        })
        .collect();
    let mut dets = Vec::new();
    for g in &gts {
        for _ in 0..rng.gen_range(0..3) {
            let j = |rng: &mut ChaCha8Rng| rng.gen_range(-3.0..3.0);
            let b = BoxF::new(g.bbox.x + j(rng), g.bbox.y + j(rng), (g.bbox.w + j(rng)).max(1.0), (g.bbox.h + j(rng)).max(1.0));
            let class = if rng.gen_bool(0.85) { g.class_id } else { 1 - g.class_id };
            dets.push(det(g.image_id, class, rng.gen_range(0.0..1.0), b));
        }
    }
    for _ in 0..rng.gen_range(0..3) {
        let b = BoxF::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(4.0..20.0), rng.gen_range(4.0..20.0));
        dets.push(det(rng.gen_range(0..images), rng.gen_range(0..2), rng.gen_range(0.0..1.0), b));
    }
    (dets, gts)
}

#[test]
fn coco_map_matches_brute_force_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut nontrivial = 0;
    for scene in 0..200 {
        let (dets, gts) = random_scene(&mut rng);
        let r = coco_map(&dets, &gts);
        let (map, map50) = map_oracle(&dets, &gts);
        assert_eq!(r.map, map, "scene {scene}");
        assert_eq!(r.map50, map50, "scene {scene}");
        assert!((0.0..=1.0).contains(&r.map));
        nontrivial += usize::from(r.map > 0.0 && r.map < 1.0);
    }
    assert!(nontrivial > 50, "only {nontrivial} scenes between 0 and 1");
}

#[test]
fn map_hand_cases() {
    let g = gt(0, 0, BoxF::new(0.0, 0.0, 10.0, 10.0));
    let perfect = coco_map(&[det(0, 0, 0.9, g.bbox)], std::slice::from_ref(&g));
    assert_eq!(perfect.map, 1.0);
    let shifted = det(0, 0, 0.9, BoxF::new(2.5, 0.0, 10.0, 10.0));
    let r = coco_map(&[shifted], std::slice::from_ref(&g));
    assert!((r.map - 0.3).abs() < 1e-12, "{}", r.map);
    assert_eq!(r.map50, 1.0);
    // A detection on an image without objects only costs precision.
    let empty_image = det(7, 0, 0.95, g.bbox);
    let r = coco_map(&[empty_image], std::slice::from_ref(&g));
    assert_eq!(r.map, 0.0);
    // A class without ground truth is left out of the mean.
    let r = coco_map(&[det(0, 0, 0.9, g.bbox), det(0, 3, 0.9, g.bbox)], std::slice::from_ref(&g));
    assert_eq!(r.per_class.len(), 1);
    assert_eq!(r.map, 1.0);
}

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]), 1.0);
    assert_eq!(accuracy(&[0, 0], &[1, 1]), 0.0);
    assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 1, 0]), 0.75);
}

#[test]
fn hand_counted_layers() {
    let mut b = NetBuilder::new(2, BlockStyle::default());
    let x = b.input();
    let c = b.conv("c", x, 4, 3, 1, 1, 1, true);
    let p = b.plif("c.plif", c);
    let spec = b.classifier("one", p, 2, vec![]);
    let r = count_ops(&spec, 4, 4).unwrap();
    assert_eq!(r.layers[1].params, 2 * 4 * 9 + 4);

    let mut b = NetBuilder::new(1, BlockStyle::default());
    let x = b.input();
    let c = b.conv("c", x, 1, 3, 1, 0, 1, false);
    let p = b.plif("c.plif", c);
    let spec = b.classifier("tiny", p, 1, vec![]);
    let r = count_ops(&spec, 6, 6).unwrap();
    assert_eq!(r.layers[1].accs + r.layers[2].accs, 144 + 16);
    assert_eq!(r.layers.iter().map(|l| l.accs).sum::<u64>(), r.accs_per_timestep);
    assert_eq!(r.layers.iter().filter(|l| l.kind == "bn").map(|l| l.accs).sum::<u64>(), 0);
}

#[test]
fn accs_scale_with_input_area() {
    let spec = build_small_cnn(&SmallCnnConfig::default(), 4, 2, BlockStyle::default()).unwrap();
    let a = count_ops(&spec, 32, 32).unwrap();
    let b = count_ops(&spec, 64, 32).unwrap();
    assert_eq!(b.conv_accs, 2 * a.conv_accs);
    assert_eq!(b.accs_per_timestep, 2 * a.accs_per_timestep);
    assert_eq!(a.params, count_params(&spec));
}

#[test]
fn table_counts_within_tolerance() {
    let s = BlockStyle::default();
    let params = |spec: NetworkSpec| count_params(&spec) as f64;
    let within = |got: f64, want: f64, tol: f64| (got - want).abs() / want <= tol;
    let cases = [
        ("VGG-11", params(build_vgg(11, 4, 2, s).unwrap()), 9.23e6),
        ("VGG-13", params(build_vgg(13, 4, 2, s).unwrap()), 9.41e6),
        ("SqueezeNet 1.0", params(build_squeezenet("1.0", 4, 2, s).unwrap()), 0.74e6),
        ("SqueezeNet 1.1", params(build_squeezenet("1.1", 4, 2, s).unwrap()), 0.72e6),
        ("MobileNet-16", params(build_mobilenet(16, 4, 2, ConvMode::Normal, s).unwrap()), 1.18e6),
        ("MobileNet-64", params(build_mobilenet(64, 4, 2, ConvMode::Normal, s).unwrap()), 18.81e6),
        ("DenseNet121-16", params(build_densenet(121, 16, 4, 2, s).unwrap()), 1.76e6),
        ("DenseNet121-24", params(build_densenet(121, 24, 4, 2, s).unwrap()), 3.93e6),
        ("DenseNet169-16", params(build_densenet(169, 16, 4, 2, s).unwrap()), 3.16e6),
    ];
    for (name, got, want) in cases {
        assert!(within(got, want, 0.05), "{name}: {got} vs {want}");
    }
    let ssd = params(build_detector(&DetectorConfig::densenet121_24(2), 4, s).unwrap());
    assert!(within(ssd, 8.2e6, 0.10), "SSD {ssd}");

    let accs = |spec: NetworkSpec| count_accs_per_timestep(&spec, 64, 64).unwrap() as f64;
    assert!(within(accs(build_vgg(11, 4, 2, s).unwrap()), 0.61e9, 0.10));
    assert!(within(accs(build_densenet(121, 16, 4, 2, s).unwrap()), 1.01e9, 0.10));
    assert!(within(accs(build_mobilenet(64, 4, 2, ConvMode::Normal, s).unwrap()), 4.20e9, 0.10));
    assert!(within(accs(build_squeezenet("1.1", 4, 2, s).unwrap()), 0.02e9, 0.25));
}

#[test]
fn sparsity_rates_and_identity() {
    let record = SpikeRecord {
        layers: vec![
            LayerSpikes {
                name: "a".into(),
                spikes: vec![2, 4],
                elements: vec![10, 10],
            },
            LayerSpikes {
                name: "b".into(),
                spikes: vec![0, 5],
                elements: vec![5, 5],
            },
        ],
    };
    let r = sparsity(&record);
    assert_eq!(r.layers[0].rate, 0.3);
    assert_eq!(r.layers[1].rate, 0.5);
    assert_eq!(r.global_rate, 11.0 / 30.0);
    assert_eq!(r.timesteps, 2);
    assert_eq!(r.dense_pass_multiplier(), r.global_rate * 2.0);
    // Rate 0.4 at five steps is two dense passes.
    let r = SparsityReport {
        layers: vec![],
        global_rate: 0.4,
        timesteps: 5,
    };
    assert!((r.dense_pass_multiplier() - 2.0).abs() < 1e-12);

    let always = SpikeRecord {
        layers: vec![LayerSpikes {
            name: "n".into(),
            spikes: vec![1; 7],
            elements: vec![1; 7],
        }],
    };
    assert_eq!(sparsity(&always).global_rate, 1.0);
    assert_eq!(sparsity(&SpikeRecord::default()).global_rate, 0.0);
}

#[test]
fn sparsity_survives_batch_norm_fusion() {
    let (net, fused) = fusion_pair(BnPlacement::Pre, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut a, mut b) = (SpikeRecord::default(), SpikeRecord::default());
    for _ in 0..10 {
        let cube = patchy_cube(&mut rng, 4, 5, 16, 16);
        a.merge(&net.run(&cube).unwrap().record);
        b.merge(&fused.run(&cube).unwrap().record);
    }
    let (ra, rb) = (sparsity(&a), sparsity(&b));
    assert!(ra.global_rate > 0.0 && ra.global_rate < 1.0);
    assert_eq!(ra.global_rate, rb.global_rate);
    assert!(ra.layers.iter().all(|l| (0.0..=1.0).contains(&l.rate)));
}

#[test]
fn report_table_and_json() {
    let rows = vec![ResultRow {
        model: "VGG-11".into(),
        params: 9_219_337,
        accs_per_timestep: 614_027_272,
        metric: Some(0.924),
        sparsity: Some(0.1),
    }];
    let t = format_table(&rows, "Accuracy");
    assert!(t.contains("9.22M") && t.contains("0.61G") && t.contains("92.40%"));
    let spec = build_small_cnn(&SmallCnnConfig::default(), 4, 2, BlockStyle::default()).unwrap();
    let r = count_ops(&spec, 32, 32).unwrap();
    let back: OpCountReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}
