//! Acceptance suite. Each test prints one `PASS`/`FAIL` line; run with
//! `cargo test -p dptv-core --test acceptance -- --nocapture` to see them.

use std::path::Path;
use std::time::{Duration, Instant};

use dptv_core::composer::{
    compose_dataset, CompositionConfig, FlipMode, LabeledImage, Provenance, Snippet, SnippetPool,
    SNIPPET_SIZE,
};
use dptv_core::fringe::{calibrate_thresholds, classify, compute_features};
use dptv_core::hough::{detect_circles, DetClass, Detection, HoughParams};
use dptv_core::labels::{dataset_labels, read_labels, write_labels, LabelFormat};
use dptv_core::metrics::{
    bias_curve, evaluate, match_detections, pr_curve, summarize_curve, ImageEval, DEFAULT_IOU,
};
use dptv_core::optics::{
    random_scene, render_particle_image, render_scene, simulate_snippet, ParticleImageSpec,
    PatternSampler, SensorModel,
};
use dptv_core::pipeline::{self, PipelineConfig, Stage};
use dptv_core::{Annotation, BBox, Phase, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-9;
const ORACLE_INSTANCES: usize = 1000;
const ORACLE_MAX_BOXES: usize = 6;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const CLASSIFY_SNIPPETS: usize = 2000;
const CLASSIFY_MIN_ACCURACY: f64 = 0.95;
const CLASSIFY_BUDGET: Duration = Duration::from_secs(120);
const MAX_NOISE: f64 = 0.02;
const FRINGE_TRIALS: usize = 500;
const FRINGE_TOL: f64 = 0.5;
const FRINGE_MIN_RATE: f64 = 0.99;
const HOUGH_SCENES: u64 = 100;
const HOUGH_MAX_PIS: usize = 10;
const HOUGH_MIN_SCORE: f64 = 0.95;
const COMPOSED_IMAGES: usize = 400;
const LABEL_TOL: f64 = 0.5;

fn report(name: &str, ok: bool, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn det(b: BBox, confidence: f64, class: DetClass) -> Detection {
    Detection {
        bbox: b,
        class,
        confidence,
    }
}

fn gt(b: BBox, class: Phase) -> Annotation {
    Annotation {
        bbox: b,
        class,
        source: None,
    }
}

// ---------------------------------------------------------------------------
// Brute-force reference evaluator: rematch from scratch at every threshold.

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    inter / (area(a) + area(b) - inter)
}

fn ref_tp(dets: &[Detection], gts: &[Annotation], t: f64) -> (usize, usize) {
    let mut kept: Vec<&Detection> = dets.iter().filter(|d| d.confidence >= t).collect();
    kept.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for d in &kept {
        let mut best = None;
        let mut best_iou = -1.0;
        for (j, g) in gts.iter().enumerate() {
            let v = ref_iou(&d.bbox, &g.bbox);
            if !used[j] && v >= DEFAULT_IOU && v > best_iou {
                best = Some(j);
                best_iou = v;
            }
        }
        if let Some(j) = best {
            used[j] = true;
            tp += 1;
        }
    }
    (tp, kept.len())
}

/// `(ap, max_recall, norm_tap)`, or `None` when no threshold has both
/// precision and recall defined.
fn ref_summary(images: &[ImageEval]) -> Option<(f64, f64, f64)> {
    let n_gt: usize = images.iter().map(|i| i.ground_truth.len()).sum();
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for k in 1..=999 {
        let t = k as f64 / 1000.0;
        let (mut tp, mut n) = (0, 0);
        for img in images {
            let (a, b) = ref_tp(&img.detections, &img.ground_truth, t);
            tp += a;
            n += b;
        }
        if n > 0 && n_gt > 0 {
            pts.push((tp as f64 / n_gt as f64, tp as f64 / n as f64));
        }
    }
    if pts.is_empty() {
        return None;
    }
    // best precision per distinct recall, in recall order
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut env: Vec<(f64, f64)> = Vec::new();
    for (r, p) in pts {
        match env.last_mut() {
            Some(last) if last.0 == r => last.1 = last.1.max(p),
            _ => env.push((r, p)),
        }
    }
    let mut ap = 0.0;
    let mut prev = (0.0, env[0].1);
    for &(r, p) in &env {
        ap += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    let max_r = prev.0;
    Some((ap, max_r, if max_r > 0.0 { ap / max_r } else { 0.0 }))
}

fn random_instance(rng: &mut ChaCha8Rng) -> ImageEval {
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0.0..60.0);
        let y = rng.random_range(0.0..60.0);
        let s = rng.random_range(5.0..30.0);
        BBox::new(x, y, x + s, y + s)
    };
    let n_gt = rng.random_range(0..=ORACLE_MAX_BOXES);
    let n_det = rng.random_range(0..=ORACLE_MAX_BOXES);
    let ground_truth: Vec<Annotation> = (0..n_gt)
        .map(|_| gt(rand_box(rng), if rng.random_bool(0.5) { Phase::Tracer } else { Phase::Dispersed }))
        .collect();
    let detections = (0..n_det)
        .map(|_| {
            let b = if !ground_truth.is_empty() && rng.random_bool(0.7) {
                let g = ground_truth[rng.random_range(0..ground_truth.len())].bbox;
                let j = 0.25 * g.width();
                let mut d = || rng.random_range(-j..j);
                BBox::new(g.x_min + d(), g.y_min + d(), g.x_max + d(), g.y_max + d())
            } else {
                rand_box(rng)
            };
            // coarse grid confidences make ties and exact threshold hits common
            let c = if rng.random_bool(0.5) {
                rng.random_range(1..=1000) as f64 / 1000.0
            } else {
                rng.random_range(0.0..1.0)
            };
            det(b, c, DetClass::Unknown)
        })
        .collect();
    ImageEval {
        detections,
        ground_truth,
    }
}

#[test]
fn metric_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    let mut compared = 0;
    for _ in 0..ORACLE_INSTANCES {
        let n_images = rng.random_range(1..=3);
        let images: Vec<ImageEval> = (0..n_images).map(|_| random_instance(&mut rng)).collect();
        let ours = summarize_curve(&pr_curve(&images, DEFAULT_IOU)).ok();
        match (ours, ref_summary(&images)) {
            (Some(s), Some((ap, mr, nt))) => {
                compared += 1;
                let e = (s.ap - ap).abs().max((s.max_recall - mr).abs()).max((s.norm_tap - nt).abs());
                worst = worst.max(e);
                if e > ORACLE_TOL {
                    mismatches += 1;
                }
            }
            (None, None) => {}
            _ => mismatches += 1,
        }
    }
    let elapsed = start.elapsed();
    report(
        "metric oracle equivalence",
        mismatches == 0 && worst <= ORACLE_TOL && elapsed < ORACLE_BUDGET && compared > ORACLE_INSTANCES / 2,
        format!(
            "{ORACLE_INSTANCES} instances ({compared} with a curve), {mismatches} mismatches, max |diff| {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn perfect_detector_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let images: Vec<ImageEval> = (0..50)
        .map(|_| {
            let ground_truth: Vec<Annotation> = (0..rng.random_range(1..8))
                .map(|k| {
                    let x = 70.0 * k as f64 + rng.random_range(0.0..10.0);
                    let s = rng.random_range(19.0..60.0);
                    let c = if rng.random_bool(0.5) { Phase::Tracer } else { Phase::Dispersed };
                    gt(BBox::new(x, 10.0, x + s, 10.0 + s), c)
                })
                .collect();
            let detections = ground_truth
                .iter()
                .map(|g| det(g.bbox, 1.0, DetClass::from(g.class)))
                .collect();
            ImageEval {
                detections,
                ground_truth,
            }
        })
        .collect();
    let (r, _) = evaluate(&images, DEFAULT_IOU).unwrap();
    report(
        "perfect detector identity",
        r.ap == 1.0 && r.norm_tap == 1.0 && r.class_accuracy == Some(1.0),
        format!("AP {} norm TAP {} CA {:?}", r.ap, r.norm_tap, r.class_accuracy),
    );
}

#[test]
fn precise_until_recall_cap() {
    // 10 PIs, 8 found with distinct confidences and no false positives
    let boxes: Vec<BBox> = (0..10)
        .map(|k| BBox::new(50.0 * k as f64, 0.0, 50.0 * k as f64 + 30.0, 30.0))
        .collect();
    let images: Vec<ImageEval> = boxes
        .chunks(5)
        .enumerate()
        .map(|(i, chunk)| {
            let ground_truth: Vec<Annotation> = chunk.iter().map(|&b| gt(b, Phase::Tracer)).collect();
            let detections = chunk
                .iter()
                .enumerate()
                .take(4)
                .map(|(k, &b)| det(b, 0.9 - 0.1 * (2 * k + i) as f64, DetClass::Tracer))
                .collect();
            ImageEval {
                detections,
                ground_truth,
            }
        })
        .collect();
    let (r, _) = evaluate(&images, DEFAULT_IOU).unwrap();
    let ok = (r.ap - 0.8).abs() <= ORACLE_TOL
        && (r.max_recall - 0.8).abs() <= ORACLE_TOL
        && (r.norm_tap - 1.0).abs() <= ORACLE_TOL;
    report(
        "AP equals max recall with unit norm TAP",
        ok,
        format!("AP {:.12} max recall {:.12} norm TAP {:.12}", r.ap, r.max_recall, r.norm_tap),
    );
}

fn snippet_features(
    n_per_class: usize,
    seed: u64,
) -> Vec<(dptv_core::fringe::PatternFeatures, Phase)> {
    let sampler = PatternSampler::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for phase in Phase::ALL {
            let sigma = rng.random_range(0.0..=MAX_NOISE);
            let (img, _) = simulate_snippet(&sampler, phase, SNIPPET_SIZE, sigma, &mut rng).unwrap();
            out.push((compute_features(&img).unwrap(), phase));
        }
    }
    out
}

#[test]
fn classification_band() {
    let start = Instant::now();
    let calibration = snippet_features(500, 0x5eed_0004);
    let t = calibrate_thresholds(&calibration).unwrap();
    let test = snippet_features(CLASSIFY_SNIPPETS / 2, 0x5eed_0044);
    let correct = test.iter().filter(|(f, c)| classify(f, &t).class == *c).count();
    let acc = correct as f64 / test.len() as f64;
    let elapsed = start.elapsed();
    report(
        "classification band",
        acc >= CLASSIFY_MIN_ACCURACY && elapsed < CLASSIFY_BUDGET,
        format!(
            "accuracy {acc:.4} on {} snippets (thresholds {t:?}), {:.1}s",
            test.len(),
            elapsed.as_secs_f64()
        ),
    );
}

/// Fringe frequency from a direct 1-D transform of the mean-removed disc,
/// projected onto the known fringe normal, cycles per diameter.
fn projected_frequency(img: &Raster, d: f64, dir: f64) -> f64 {
    const BIN: f64 = 0.25;
    let c = 0.5 * img.width() as f64;
    let r = 0.5 * d;
    let mut pts = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
            if dx.hypot(dy) < r - 1.0 {
                pts.push((dx * dir.cos() + dy * dir.sin(), img.get(x, y)));
            }
        }
    }
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let nb = (2.0 * r / BIN).ceil() as usize + 1;
    let mut profile = vec![0.0; nb];
    for &(u, v) in &pts {
        profile[((u + r) / BIN) as usize] += v - mean;
    }
    let power = |f: f64| {
        let (mut re, mut im) = (0.0, 0.0);
        for (k, &p) in profile.iter().enumerate() {
            let a = 2.0 * std::f64::consts::PI * f * ((k as f64 + 0.5) * BIN - r) / d;
            re += p * a.cos();
            im -= p * a.sin();
        }
        re * re + im * im
    };
    (100..=1200)
        .map(|k| k as f64 / 100.0)
        .map(|f| (f, power(f)))
        .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
        .0
}

#[test]
fn fringe_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let (mut hits, mut oracle_hits) = (0, 0);
    let mut misses = Vec::new();
    for _ in 0..FRINGE_TRIALS {
        let n_f = rng.random_range(2..=10) as f64;
        let size = rng.random_range(48..=128usize);
        let dir = rng.random_range(0.0..std::f64::consts::PI);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let peak = rng.random_range(0.6..=1.0);
        let spec = ParticleImageSpec::regular([0.0, 0.0], size as f64, n_f, dir, phase, peak);
        let img = render_particle_image(&spec, size).unwrap();
        let f = compute_features(&img).unwrap();
        if (f.peak_freq - n_f).abs() <= FRINGE_TOL {
            hits += 1;
        } else {
            misses.push((n_f, size, f.peak_freq));
        }
        if (projected_frequency(&img, size as f64, dir) - n_f).abs() <= FRINGE_TOL {
            oracle_hits += 1;
        }
    }
    let rate = hits as f64 / FRINGE_TRIALS as f64;
    let oracle_rate = oracle_hits as f64 / FRINGE_TRIALS as f64;
    misses.truncate(5);
    report(
        "fringe oracle",
        rate >= FRINGE_MIN_RATE && oracle_rate >= FRINGE_MIN_RATE,
        format!(
            "spectral peak within {FRINGE_TOL} in {rate:.3}, 1-D reference in {oracle_rate:.3} of {FRINGE_TRIALS}; misses {misses:?}"
        ),
    );
}

#[test]
fn detector_round_trip() {
    let mut sensor = SensorModel::new(600, 600);
    sensor.noise_sigma = MAX_NOISE;
    let sampler = PatternSampler::default();
    let params = HoughParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006);
    let (mut tp, mut n_det, mut n_gt) = (0, 0, 0);
    for s in 0..HOUGH_SCENES {
        let total = rng.random_range(1..=HOUGH_MAX_PIS);
        let tracers = rng.random_range(0..=total);
        let scene = random_scene(&sensor, &sampler, tracers, total - tracers, true, s).unwrap();
        let r = render_scene(&scene).unwrap();
        let dets = detect_circles(&r.image, &params).unwrap();
        let m = match_detections(&dets, &r.annotations, DEFAULT_IOU, true);
        tp += m.pairs.len();
        n_det += dets.len();
        n_gt += r.annotations.len();
    }
    let recall = tp as f64 / n_gt as f64;
    let precision = tp as f64 / n_det.max(1) as f64;
    report(
        "detector round trip",
        recall >= HOUGH_MIN_SCORE && precision >= HOUGH_MIN_SCORE,
        format!("recall {recall:.4} precision {precision:.4} ({tp} TP, {n_det} detections, {n_gt} PIs)"),
    );
}

fn simulated_pool(phase: Phase, n: usize, seed: u64) -> SnippetPool {
    let sampler = PatternSampler::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = SnippetPool::new(phase, Provenance::Simulated);
    for _ in 0..n {
        let (img, _) = simulate_snippet(&sampler, phase, SNIPPET_SIZE, 0.0, &mut rng).unwrap();
        pool.snippets.push(Snippet::full_frame(img, 0.5 * SNIPPET_SIZE as f64));
    }
    pool
}

fn flip_exact(base: &LabeledImage, img: &LabeledImage, h: bool, v: bool) -> bool {
    let (w, ht) = (base.image.width(), base.image.height());
    let pixels = (0..ht).all(|y| {
        (0..w).all(|x| {
            let sx = if h { w - 1 - x } else { x };
            let sy = if v { ht - 1 - y } else { y };
            img.image.get(x, y) == base.image.get(sx, sy)
        })
    });
    let boxes = img.annotations.len() == base.annotations.len()
        && img.annotations.iter().zip(&base.annotations).all(|(a, b)| {
            let o = b.bbox;
            let (x0, x1) = if h { (w as f64 - o.x_max, w as f64 - o.x_min) } else { (o.x_min, o.x_max) };
            let (y0, y1) = if v { (ht as f64 - o.y_max, ht as f64 - o.y_min) } else { (o.y_min, o.y_max) };
            a.bbox == BBox::new(x0, y0, x1, y1) && a.class == b.class
        });
    pixels && boxes
}

#[test]
fn composer_bookkeeping() {
    let pools = vec![
        simulated_pool(Phase::Tracer, 60, 0x5eed_0007),
        simulated_pool(Phase::Dispersed, 60, 0x5eed_0077),
    ];
    let config = CompositionConfig {
        images: COMPOSED_IMAGES / 4,
        flip: FlipMode::Hv,
        seed: 7,
        ..Default::default()
    };
    let ds = compose_dataset(&pools, &config).unwrap();
    let n_ann: usize = ds.images.iter().map(|i| i.annotations.len()).sum();

    let class_ok = ds.images.iter().flat_map(|i| &i.annotations).all(|a| {
        a.source.as_ref().is_some_and(|s| {
            pools
                .iter()
                .find(|p| p.class == s.pool)
                .is_some_and(|p| p.class == a.class && s.index < p.len())
        })
    });
    let in_canvas = ds.images.iter().all(|i| {
        let (w, h) = (i.image.width() as f64, i.image.height() as f64);
        i.annotations.iter().all(|a| a.bbox.is_valid() && a.bbox.inside(w, h))
    });
    let variants = FlipMode::Hv.variants();
    let flips_ok = ds.images.chunks(variants.len()).all(|group| {
        group
            .iter()
            .zip(variants)
            .all(|(img, &(h, v))| flip_exact(&group[0], img, h, v))
    });

    let labels = dataset_labels(&ds);
    let sizes: Vec<(String, usize, usize)> = labels.iter().map(|l| (l.name.clone(), l.width, l.height)).collect();
    let mut worst = 0.0f64;
    let mut round_trip_ok = true;
    for format in [LabelFormat::YoloTxt, LabelFormat::CocoJson] {
        let dir = tempfile::tempdir().unwrap();
        write_labels(&labels, format, dir.path()).unwrap();
        let back = read_labels(format, dir.path(), &sizes).unwrap();
        round_trip_ok &= back.len() == labels.len();
        for (a, b) in labels.iter().zip(&back) {
            round_trip_ok &= a.name == b.name && a.annotations.len() == b.annotations.len();
            for (x, y) in a.annotations.iter().zip(&b.annotations) {
                round_trip_ok &= x.class == y.class;
                for (p, q) in [
                    (x.bbox.x_min, y.bbox.x_min),
                    (x.bbox.y_min, y.bbox.y_min),
                    (x.bbox.x_max, y.bbox.x_max),
                    (x.bbox.y_max, y.bbox.y_max),
                ] {
                    worst = worst.max((p - q).abs());
                }
            }
        }
    }
    report(
        "composer bookkeeping",
        ds.images.len() == COMPOSED_IMAGES && class_ok && in_canvas && flips_ok && round_trip_ok && worst <= LABEL_TOL,
        format!(
            "{} images, {n_ann} annotations; classes {class_ok}, in canvas {in_canvas}, flips exact {flips_ok}, label round trip {round_trip_ok} (max error {worst:.2e} px)",
            ds.images.len()
        ),
    );
}

fn fp_fixture(classes: &[(DetClass, f64)]) -> Vec<ImageEval> {
    let g = BBox::new(0.0, 0.0, 20.0, 20.0);
    // the true positive ranks last so every FP survives the max-F1 threshold
    let mut detections = vec![det(g, 0.05, DetClass::Tracer)];
    detections.extend(classes.iter().enumerate().map(|(k, &(c, conf))| {
        let x = 40.0 + 30.0 * k as f64;
        det(BBox::new(x, 0.0, x + 20.0, 20.0), conf, c)
    }));
    vec![ImageEval {
        detections,
        ground_truth: vec![gt(g, Phase::Tracer)],
    }]
}

#[test]
fn bias_semantics() {
    let bias = |fx: &[(DetClass, f64)]| evaluate(&fp_fixture(fx), DEFAULT_IOU).unwrap().0.fp_class_bias;
    let all_tracer = bias(&[(DetClass::Tracer, 0.9); 4]);
    let all_dispersed = bias(&[(DetClass::Dispersed, 0.9); 4]);
    let balanced = bias(&[
        (DetClass::Tracer, 0.9),
        (DetClass::Dispersed, 0.9),
        (DetClass::Tracer, 0.8),
        (DetClass::Dispersed, 0.8),
    ]);

    // tracer FPs sit at low confidence, dispersed ones at high confidence
    let mut leaning: Vec<(DetClass, f64)> = (1..=5).map(|k| (DetClass::Tracer, 0.1 * k as f64)).collect();
    leaning.extend((0..10).map(|k| (DetClass::Dispersed, 0.5 + 0.05 * k as f64)));
    let curve = bias_curve(&fp_fixture(&leaning), DEFAULT_IOU);
    let non_increasing = curve.windows(2).all(|w| w[1].bias <= w[0].bias + 1e-12);
    let first = curve.first().map(|p| p.bias).unwrap_or(f64::NAN);
    let last = curve.last().map(|p| p.bias).unwrap_or(f64::NAN);

    let ok = all_tracer == Some(1.0)
        && all_dispersed == Some(-1.0)
        && balanced == Some(0.0)
        && non_increasing
        && last == -1.0
        && first > last;
    report(
        "bias semantics",
        ok,
        format!(
            "all tracer {all_tracer:?}, all dispersed {all_dispersed:?}, balanced {balanced:?}; dispersed-leaning curve {first:.3} -> {last:.3} over {} thresholds, non-increasing {non_increasing}",
            curve.len()
        ),
    );
}

const DETERMINISM_CONFIG: &str = r#"
seed = 2024

[simulate]
acquisition_images = 3
test_images = 4

[extract]

[compose]
dataset = { images = 8, per_class = [4, 6] }

[classify]
calibration_per_class = 200

[evaluate]
"#;

fn pipeline_outputs(out: &Path) -> (String, Vec<u8>) {
    let config = PipelineConfig::parse(DETERMINISM_CONFIG).unwrap();
    pipeline::run(&config, &Stage::ALL, out).unwrap();
    let compose = config.stage_dir(out, Stage::Compose).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(compose.join("dataset/manifest.json")).unwrap()).unwrap();
    let metrics = std::fs::read(config.stage_dir(out, Stage::Evaluate).unwrap().join("metrics.json")).unwrap();
    (manifest["dataset_hash"].as_str().unwrap().to_string(), metrics)
}

#[test]
fn pipeline_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (hash_a, metrics_a) = pipeline_outputs(a.path());
    let (hash_b, metrics_b) = pipeline_outputs(b.path());
    report(
        "pipeline determinism",
        hash_a == hash_b && metrics_a == metrics_b,
        format!(
            "dataset hash {} / {}, metrics.json {} / {} bytes, identical {}",
            &hash_a[..16],
            &hash_b[..16],
            metrics_a.len(),
            metrics_b.len(),
            metrics_a == metrics_b
        ),
    );
}
