use std::f64::consts::PI;

use dptv_core::composer::{
    compose_dataset, CompositionConfig, FlipMode, OverlapPolicy, Provenance, Snippet, SnippetPool,
    SNIPPET_SIZE,
};
use dptv_core::fringe::compute_features;
use dptv_core::hough::{filter_overlaps, DetClass, Detection, OverlapMode};
use dptv_core::metrics::{
    bias_curve, match_detections, pr_curve, summarize_curve, ImageEval, MatchResult, DEFAULT_IOU,
};
use dptv_core::optics::{
    random_scene, render_particle_image, render_scene, ParticleImageSpec, PatternSampler,
    SensorModel,
};
use dptv_core::{iou, Annotation, BBox, Phase, Raster};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..80.0f64, 0.0..80.0f64, 4.0..30.0f64, 4.0..30.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn arb_class() -> impl Strategy<Value = DetClass> {
    prop_oneof![
        Just(DetClass::Tracer),
        Just(DetClass::Dispersed),
        Just(DetClass::Unknown)
    ]
}

fn arb_phase() -> impl Strategy<Value = Phase> {
    prop_oneof![Just(Phase::Tracer), Just(Phase::Dispersed)]
}

fn arb_gt() -> impl Strategy<Value = Annotation> {
    (arb_box(), arb_phase()).prop_map(|(bbox, class)| Annotation {
        bbox,
        class,
        source: None,
    })
}

/// Detections drawn either freely or as jittered copies of ground truth.
fn arb_image(max: usize) -> impl Strategy<Value = ImageEval> {
    prop::collection::vec(arb_gt(), 0..=max).prop_flat_map(move |gts| {
        let n = gts.len();
        let det = (
            arb_box(),
            0..n.max(1),
            prop::bool::ANY,
            (-3.0..3.0f64, -3.0..3.0f64),
            0.0..=1.0f64,
            arb_class(),
        )
            .prop_map({
                let gts = gts.clone();
                move |(free, pick, copy, (dx, dy), confidence, class)| {
                    let bbox = if copy && !gts.is_empty() {
                        gts[pick].bbox.translate(dx, dy)
                    } else {
                        free
                    };
                    Detection {
                        bbox,
                        class,
                        confidence,
                    }
                }
            });
        prop::collection::vec(det, 0..=max).prop_map(move |detections| ImageEval {
            detections,
            ground_truth: gts.clone(),
        })
    })
}

/// Largest one-to-one assignment with IoU >= threshold, by exhaustive search.
fn max_cardinality(dets: &[Detection], gts: &[Annotation], thr: f64) -> usize {
    fn go(i: usize, dets: &[Detection], gts: &[Annotation], used: &mut Vec<bool>, thr: f64) -> usize {
        if i == dets.len() {
            return 0;
        }
        let mut best = go(i + 1, dets, gts, used, thr);
        for j in 0..gts.len() {
            if !used[j] && iou(&dets[i].bbox, &gts[j].bbox) >= thr {
                used[j] = true;
                best = best.max(1 + go(i + 1, dets, gts, used, thr));
                used[j] = false;
            }
        }
        best
    }
    go(0, dets, gts, &mut vec![false; gts.len()], thr)
}

fn check_match_invariants(m: &MatchResult, n_det: usize, n_gt: usize, thr: f64) -> Result<(), TestCaseError> {
    let mut det_seen = vec![0; n_det];
    let mut gt_seen = vec![0; n_gt];
    for &(d, g, v) in &m.pairs {
        det_seen[d] += 1;
        gt_seen[g] += 1;
        prop_assert!(v >= thr);
    }
    for &d in &m.unmatched_detections {
        det_seen[d] += 1;
    }
    for &g in &m.unmatched_ground_truth {
        gt_seen[g] += 1;
    }
    prop_assert!(det_seen.iter().all(|&c| c == 1));
    prop_assert!(gt_seen.iter().all(|&c| c == 1));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matching_is_one_to_one(img in arb_image(6), agnostic in prop::bool::ANY) {
        let m = match_detections(&img.detections, &img.ground_truth, DEFAULT_IOU, agnostic);
        check_match_invariants(&m, img.detections.len(), img.ground_truth.len(), DEFAULT_IOU)?;
        let c = m.confusion();
        prop_assert_eq!(c.tp + c.fn_, img.ground_truth.len());
        prop_assert_eq!(c.tp + c.fp, img.detections.len());
    }

    #[test]
    fn class_agnostic_ignores_labels(img in arb_image(6), classes in prop::collection::vec(arb_class(), 6)) {
        let a = match_detections(&img.detections, &img.ground_truth, DEFAULT_IOU, true);
        let relabeled: Vec<Detection> = img
            .detections
            .iter()
            .zip(classes.iter().cycle())
            .map(|(d, &class)| Detection { class, ..*d })
            .collect();
        let b = match_detections(&relabeled, &img.ground_truth, DEFAULT_IOU, true);
        prop_assert_eq!(a.confusion(), b.confusion());
    }

    #[test]
    fn greedy_is_maximal_and_bounded(img in arb_image(5)) {
        let m = match_detections(&img.detections, &img.ground_truth, DEFAULT_IOU, true);
        let best = max_cardinality(&img.detections, &img.ground_truth, DEFAULT_IOU);
        let tp = m.pairs.len();
        prop_assert!(tp <= best);
        // maximal: no free detection/GT pair is still matchable
        for &d in &m.unmatched_detections {
            for &g in &m.unmatched_ground_truth {
                prop_assert!(iou(&img.detections[d].bbox, &img.ground_truth[g].bbox) < DEFAULT_IOU);
            }
        }
        prop_assert!(2 * tp >= best);
    }

    #[test]
    fn greedy_is_optimal_for_disjoint_ground_truth(
        sizes in prop::collection::vec(6.0..20.0f64, 1..=5),
        dets in prop::collection::vec((0..5usize, -3.0..3.0f64, -3.0..3.0f64, 0.0..=1.0f64), 0..=5),
    ) {
        let gts: Vec<Annotation> = sizes
            .iter()
            .enumerate()
            .map(|(k, &s)| Annotation {
                bbox: BBox::new(30.0 * k as f64, 0.0, 30.0 * k as f64 + s, s),
                class: Phase::Tracer,
                source: None,
            })
            .collect();
        let dets: Vec<Detection> = dets
            .iter()
            .map(|&(k, dx, dy, confidence)| Detection {
                bbox: gts[k % gts.len()].bbox.translate(dx, dy),
                class: DetClass::Unknown,
                confidence,
            })
            .collect();
        let m = match_detections(&dets, &gts, DEFAULT_IOU, true);
        prop_assert_eq!(m.pairs.len(), max_cardinality(&dets, &gts, DEFAULT_IOU));
    }

    #[test]
    fn curve_is_monotone_and_summary_bounded(images in prop::collection::vec(arb_image(6), 1..4)) {
        let curve = pr_curve(&images, DEFAULT_IOU);
        prop_assert_eq!(curve.points.len(), 999);
        for w in curve.points.windows(2) {
            prop_assert!(w[1].tp <= w[0].tp);
            prop_assert!(w[1].fp <= w[0].fp);
            prop_assert!(w[1].fn_ >= w[0].fn_);
            if let (Some(a), Some(b)) = (w[0].recall, w[1].recall) {
                prop_assert!(b <= a);
            }
        }
        for p in &curve.points {
            for v in [p.precision, p.recall].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        if let Ok(s) = summarize_curve(&curve) {
            prop_assert!(s.ap <= s.max_recall + 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s.norm_tap));
        }
        for b in bias_curve(&images, DEFAULT_IOU) {
            prop_assert!((-1.0..=1.0).contains(&b.bias));
        }
    }

    #[test]
    fn drop_both_leaves_no_overlap(
        boxes in prop::collection::vec((arb_box(), 0.0..=1.0f64), 0..12),
        thr in 0.0..0.6f64,
    ) {
        let mut dets: Vec<Detection> = boxes
            .iter()
            .map(|&(bbox, confidence)| Detection { bbox, class: DetClass::Unknown, confidence })
            .collect();
        dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        for mode in [OverlapMode::DropBoth, OverlapMode::KeepBest] {
            let kept = filter_overlaps(&dets, thr, mode);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rendering_is_deterministic(seed in any::<u64>(), tracers in 0..4usize, dispersed in 0..4usize) {
        let mut sensor = SensorModel::new(200, 200);
        sensor.noise_sigma = 0.01;
        let sampler = PatternSampler { diameter: [19.0, 60.0], ..Default::default() };
        let scene = random_scene(&sensor, &sampler, tracers, dispersed, true, seed).unwrap();
        let a = render_scene(&scene).unwrap();
        let b = render_scene(&scene).unwrap();
        prop_assert_eq!(a.image.data(), b.image.data());
        for (ann, p) in a.annotations.iter().zip(&scene.particles) {
            prop_assert_eq!(ann.class, p.class());
            prop_assert!(p.center[0] >= 0.0 && p.center[0] <= 200.0);
            prop_assert!(p.center[1] >= 0.0 && p.center[1] <= 200.0);
        }
    }

    #[test]
    fn brighter_peak_raises_disc_mean(
        d in 20.0..64.0f64,
        n_f in 2.0..8.0f64,
        dir in 0.0..PI,
        lo in 0.1..0.8f64,
        step in 0.01..0.2f64,
    ) {
        let mean = |peak: f64| {
            let spec = ParticleImageSpec::regular([0.0, 0.0], d, n_f, dir, 0.3, peak);
            let img = render_particle_image(&spec, 64).unwrap();
            let c = 32.0;
            let (mut s, mut n) = (0.0, 0);
            for y in 0..64 {
                for x in 0..64 {
                    if (x as f64 + 0.5 - c).hypot(y as f64 + 0.5 - c) < 0.5 * d - 1.0 {
                        s += img.get(x, y);
                        n += 1;
                    }
                }
            }
            s / n as f64
        };
        prop_assert!(mean(lo + step) > mean(lo));
    }

    #[test]
    fn features_scale_invariant(n_f in 3.0..9.0f64, dir in 0.0..PI, c in 0.05..20.0f64) {
        let spec = ParticleImageSpec::regular([0.0, 0.0], 64.0, n_f, dir, 0.4, 0.9);
        let img = render_particle_image(&spec, 64).unwrap();
        let a = compute_features(&img).unwrap();
        let b = compute_features(&img.map(|v| c * v)).unwrap();
        for (x, y) in [
            (a.dc_fraction, b.dc_fraction),
            (a.anisotropy, b.anisotropy),
            (a.peak_freq, b.peak_freq),
            (a.peak_dir, b.peak_dir),
            (a.peak_to_median, b.peak_to_median),
        ] {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn features_rotate_with_the_snippet(n_f in 3.0..9.0f64, dir in 0.0..PI) {
        let spec = ParticleImageSpec::regular([0.0, 0.0], 64.0, n_f, dir, 0.4, 0.9);
        let img = render_particle_image(&spec, 64).unwrap();
        let a = compute_features(&img).unwrap();
        let b = compute_features(&img.rotate90()).unwrap();
        prop_assert!((a.anisotropy - b.anisotropy).abs() <= 0.02);
        let turn = (b.peak_dir - a.peak_dir).rem_euclid(PI);
        prop_assert!((turn - PI / 2.0).abs() < 0.05, "{} -> {}", a.peak_dir, b.peak_dir);
    }
}

fn flat_pool(class: Phase, levels: &[f64]) -> SnippetPool {
    let mut pool = SnippetPool::new(class, Provenance::Simulated);
    for &v in levels {
        let img = Raster::new(SNIPPET_SIZE, SNIPPET_SIZE, v);
        pool.snippets.push(Snippet::full_frame(img, 32.0));
    }
    pool
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn composed_labels_are_consistent(seed in any::<u64>(), lo in 0..4usize, extra in 0..4usize, reject in prop::bool::ANY) {
        let pools = vec![
            flat_pool(Phase::Tracer, &[0.3, 0.5, 0.7]),
            flat_pool(Phase::Dispersed, &[0.4, 0.6]),
        ];
        let config = CompositionConfig {
            canvas: [320, 240],
            images: 3,
            resize: [0.5, 1.0],
            per_class: [lo, lo + extra],
            flip: FlipMode::Hv,
            overlap: if reject { OverlapPolicy::Reject(0.0) } else { OverlapPolicy::Allow },
            seed,
            ..Default::default()
        };
        let a = compose_dataset(&pools, &config).unwrap();
        let b = compose_dataset(&pools, &config).unwrap();
        prop_assert_eq!(&a.manifest.dataset_hash, &b.manifest.dataset_hash);
        for img in &a.images {
            for ann in &img.annotations {
                prop_assert!(ann.bbox.inside(320.0, 240.0));
                let src = ann.source.as_ref().unwrap();
                prop_assert_eq!(src.pool, ann.class);
            }
        }
        for group in a.images.chunks(4) {
            for (ann, h) in group[0].annotations.iter().zip(&group[1].annotations) {
                prop_assert_eq!(h.bbox.x_min, 320.0 - ann.bbox.x_max);
                prop_assert_eq!(h.bbox.x_max, 320.0 - ann.bbox.x_min);
            }
        }
    }
}

#[test]
fn greedy_can_fall_short_of_maximum_matching() {
    // The confident detection prefers G1 although only it could reach G2.
    let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
    let g2 = BBox::new(3.0, 0.0, 13.0, 10.0);
    let gts: Vec<Annotation> = [g1, g2]
        .iter()
        .map(|&bbox| Annotation { bbox, class: Phase::Tracer, source: None })
        .collect();
    let dets = [
        Detection { bbox: BBox::new(1.0, 0.0, 11.0, 10.0), class: DetClass::Unknown, confidence: 0.9 },
        Detection { bbox: BBox::new(-1.0, 0.0, 9.0, 10.0), class: DetClass::Unknown, confidence: 0.8 },
    ];
    assert!(iou(&dets[0].bbox, &g1) > iou(&dets[0].bbox, &g2));
    assert!(iou(&dets[0].bbox, &g2) >= DEFAULT_IOU);
    assert!(iou(&dets[1].bbox, &g1) >= DEFAULT_IOU);
    assert!(iou(&dets[1].bbox, &g2) < DEFAULT_IOU);
    let m = match_detections(&dets, &gts, DEFAULT_IOU, true);
    assert_eq!(m.pairs.len(), 1);
    assert_eq!(max_cardinality(&dets, &gts, DEFAULT_IOU), 2);
}
