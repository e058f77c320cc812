//! Detection and classification evaluation.
//!
//! Detection is scored class-agnostically: a detection is a true positive
//! when it is matched to a ground-truth box at IoU >= the matching
//! threshold (0.5 by default). Precision and recall are computed at 999
//! confidence thresholds `0.001..=0.999`; AP is the trapezoidal area under
//! precision over recall, normalized TAP divides it by the maximum recall.
//! Classification accuracy (over matched detections) and the false-positive
//! class bias are read at the threshold of maximum F1.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Annotation, Phase};
use crate::hough::{DetClass, Detection};

pub const DEFAULT_IOU: f64 = 0.5;
pub const SWEEP_STEPS: usize = 999;

/// The 999 confidence thresholds `k / 1000`, `k = 1..=999`.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..=SWEEP_STEPS).map(|k| k as f64 / 1000.0).collect()
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Annotation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(detection index, ground-truth index, IoU)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_ground_truth: Vec<usize>,
}

impl MatchResult {
    pub fn confusion(&self) -> DetectionConfusion {
        DetectionConfusion {
            tp: self.pairs.len(),
            fp: self.unmatched_detections.len(),
            fn_: self.unmatched_ground_truth.len(),
        }
    }
}

/// Indices of `dets` in processing order: confidence descending, stable.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy one-to-one matching. Detections are visited by descending
/// confidence; each takes the highest-IoU unmatched ground truth with
/// IoU >= `iou_thr` (and equal class unless `class_agnostic`).
pub fn match_detections(
    dets: &[Detection],
    gts: &[Annotation],
    iou_thr: f64,
    class_agnostic: bool,
) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for i in confidence_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || (!class_agnostic && d.class.phase() != Some(g.class)) {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) => {
                taken[j] = true;
                result.pairs.push((i, j, v));
            }
            None => result.unmatched_detections.push(i),
        }
    }
    result.unmatched_ground_truth = (0..gts.len()).filter(|&j| !taken[j]).collect();
    result
}

/// Class-agnostic matching of the detections with confidence >= `threshold`.
/// Indices refer to the unfiltered detection list.
pub fn match_at_threshold(image: &ImageEval, threshold: f64, iou_thr: f64) -> MatchResult {
    let kept: Vec<usize> = (0..image.detections.len())
        .filter(|&i| image.detections[i].confidence >= threshold)
        .collect();
    let dets: Vec<Detection> = kept.iter().map(|&i| image.detections[i]).collect();
    let mut m = match_detections(&dets, &image.ground_truth, iou_thr, true);
    for p in &mut m.pairs {
        p.0 = kept[p.0];
    }
    for d in &mut m.unmatched_detections {
        *d = kept[*d];
    }
    m
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionConfusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for DetectionConfusion {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Precision and recall; `None` where the denominator is zero.
pub fn confusion_to_pr(c: &DetectionConfusion) -> (Option<f64>, Option<f64>) {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// Class confusion over matched detections, tracer as the positive class.
/// Matched detections without a class prediction are counted separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassConfusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub unclassified: usize,
}

impl ClassConfusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_ + self.unclassified
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.tp + self.tn) as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<CurvePoint>,
}

/// Per-detection outcome of the full greedy pass, enough to reconstruct
/// every threshold: greedy decisions depend only on higher-confidence
/// detections, so filtering by a threshold keeps a prefix of the pass.
struct Outcome {
    confidence: f64,
    matched: bool,
    class: DetClass,
}

fn outcomes(images: &[ImageEval], iou_thr: f64) -> (Vec<Outcome>, usize) {
    let mut all = Vec::new();
    let mut total_gt = 0;
    for img in images {
        total_gt += img.ground_truth.len();
        let m = match_detections(&img.detections, &img.ground_truth, iou_thr, true);
        let mut matched = vec![false; img.detections.len()];
        for &(i, _, _) in &m.pairs {
            matched[i] = true;
        }
        all.extend(img.detections.iter().zip(matched).map(|(d, matched)| Outcome {
            confidence: d.confidence,
            matched,
            class: d.class,
        }));
    }
    all.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    (all, total_gt)
}

/// Walks thresholds in ascending order, handing each the outcomes of the
/// detections with confidence >= threshold.
fn sweep<T>(outcomes: &[Outcome], mut f: impl FnMut(f64, &[Outcome]) -> T) -> Vec<T> {
    sweep_thresholds()
        .into_iter()
        .map(|t| {
            let n = outcomes.partition_point(|o| o.confidence >= t);
            f(t, &outcomes[..n])
        })
        .collect()
}

/// Precision/recall at each sweep threshold (class-agnostic matching).
pub fn pr_curve(images: &[ImageEval], iou_thr: f64) -> PrCurve {
    let (outcomes, total_gt) = outcomes(images, iou_thr);
    let points = sweep(&outcomes, |threshold, kept| {
        let tp = kept.iter().filter(|o| o.matched).count();
        let c = DetectionConfusion {
            tp,
            fp: kept.len() - tp,
            fn_: total_gt - tp,
        };
        let (precision, recall) = confusion_to_pr(&c);
        CurvePoint {
            threshold,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision,
            recall,
        }
    });
    PrCurve { points }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub ap: f64,
    pub max_recall: f64,
    pub norm_tap: f64,
    pub f1_max_threshold: f64,
    pub f1_max: f64,
}

/// AP by the trapezoidal rule over the defined points (duplicate recalls
/// collapsed to their best precision, the first precision held back to
/// recall 0), normalized TAP, and the max-F1 threshold (lowest on ties).
pub fn summarize_curve(curve: &PrCurve) -> Result<CurveSummary> {
    let defined: Vec<(f64, f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| Some((p.threshold, p.precision?, p.recall?)))
        .collect();
    if defined.is_empty() {
        return Err(Error::EmptyCurve);
    }
    let mut by_recall: Vec<(f64, f64)> = defined.iter().map(|&(_, p, r)| (r, p)).collect();
    by_recall.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    by_recall.dedup_by(|later, first| later.0 == first.0);

    let (mut prev_r, mut prev_p) = (0.0, by_recall[0].1);
    let mut ap = 0.0;
    for &(r, p) in &by_recall {
        ap += (r - prev_r) * 0.5 * (p + prev_p);
        prev_r = r;
        prev_p = p;
    }
    let max_recall = prev_r;
    let norm_tap = if max_recall > 0.0 { ap / max_recall } else { 0.0 };

    let mut f1_best: Option<(f64, f64)> = None;
    for &(t, p, r) in &defined {
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f1_best.is_none_or(|(_, b)| f1 > b) {
            f1_best = Some((t, f1));
        }
    }
    let (f1_max_threshold, f1_max) = f1_best.expect("defined is non-empty");
    Ok(CurveSummary {
        ap,
        max_recall,
        norm_tap,
        f1_max_threshold,
        f1_max,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpByClass {
    pub tracer: usize,
    pub dispersed: usize,
    pub unknown: usize,
}

impl FpByClass {
    fn add(&mut self, class: DetClass) {
        match class {
            DetClass::Tracer => self.tracer += 1,
            DetClass::Dispersed => self.dispersed += 1,
            DetClass::Unknown => self.unknown += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tracer + self.dispersed + self.unknown
    }

    /// `(FP_tracer - FP_dispersed) / FP_total`; `None` without false positives.
    pub fn bias(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.tracer as f64 - self.dispersed as f64) / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub confusion: ClassConfusion,
    pub false_positives: FpByClass,
    pub class_accuracy: Option<f64>,
    pub fp_class_bias: Option<f64>,
}

/// Class accuracy over matched pairs and FP class bias over unmatched
/// detections. `matches[i]` must index into `images[i]`.
pub fn classification_report(images: &[ImageEval], matches: &[MatchResult]) -> ClassReport {
    let mut confusion = ClassConfusion::default();
    let mut fps = FpByClass::default();
    for (img, m) in images.iter().zip(matches) {
        for &(di, gi, _) in &m.pairs {
            let truth = img.ground_truth[gi].class;
            match (img.detections[di].class.phase(), truth) {
                (Some(Phase::Tracer), Phase::Tracer) => confusion.tp += 1,
                (Some(Phase::Dispersed), Phase::Dispersed) => confusion.tn += 1,
                (Some(Phase::Tracer), Phase::Dispersed) => confusion.fp += 1,
                (Some(Phase::Dispersed), Phase::Tracer) => confusion.fn_ += 1,
                (None, _) => confusion.unclassified += 1,
            }
        }
        for &di in &m.unmatched_detections {
            fps.add(img.detections[di].class);
        }
    }
    ClassReport {
        confusion,
        false_positives: fps,
        class_accuracy: confusion.accuracy(),
        fp_class_bias: fps.bias(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub threshold: f64,
    pub bias: f64,
}

/// FP class bias at each sweep threshold; thresholds without FPs are omitted.
pub fn bias_curve(images: &[ImageEval], iou_thr: f64) -> Vec<BiasPoint> {
    let (outcomes, _) = outcomes(images, iou_thr);
    sweep(&outcomes, |threshold, kept| {
        let mut fps = FpByClass::default();
        for o in kept.iter().filter(|o| !o.matched) {
            fps.add(o.class);
        }
        fps.bias().map(|bias| BiasPoint { threshold, bias })
    })
    .into_iter()
    .flatten()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_threshold: f64,
    pub images: usize,
    pub ground_truth: usize,
    pub ap: f64,
    pub max_recall: f64,
    pub norm_tap: f64,
    pub f1_max_threshold: f64,
    pub f1_max: f64,
    /// Detection confusion at the max-F1 threshold.
    pub detection: DetectionConfusion,
    pub class_confusion: ClassConfusion,
    pub class_accuracy: Option<f64>,
    pub fp_class_bias: Option<f64>,
    pub bias_curve: Vec<BiasPoint>,
}

/// Full evaluation: PR sweep, summary, classification at the max-F1 threshold.
pub fn evaluate(images: &[ImageEval], iou_thr: f64) -> Result<(MetricsReport, PrCurve)> {
    let curve = pr_curve(images, iou_thr);
    let summary = summarize_curve(&curve)?;
    let matches: Vec<MatchResult> = images
        .iter()
        .map(|img| match_at_threshold(img, summary.f1_max_threshold, iou_thr))
        .collect();
    let detection = matches
        .iter()
        .map(MatchResult::confusion)
        .fold(DetectionConfusion::default(), |a, b| a + b);
    let class = classification_report(images, &matches);
    let report = MetricsReport {
        iou_threshold: iou_thr,
        images: images.len(),
        ground_truth: images.iter().map(|i| i.ground_truth.len()).sum(),
        ap: summary.ap,
        max_recall: summary.max_recall,
        norm_tap: summary.norm_tap,
        f1_max_threshold: summary.f1_max_threshold,
        f1_max: summary.f1_max,
        detection,
        class_confusion: class.confusion,
        class_accuracy: class.class_accuracy,
        fp_class_bias: class.fp_class_bias,
        bias_curve: bias_curve(images, iou_thr),
    };
    Ok((report, curve))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn pr_curve_csv(curve: &PrCurve) -> String {
    let mut s = String::from("threshold,tp,fp,fn,precision,recall\n");
    for p in &curve.points {
        let _ = writeln!(
            s,
            "{:.3},{},{},{},{},{}",
            p.threshold,
            p.tp,
            p.fp,
            p.fn_,
            opt(p.precision),
            opt(p.recall)
        );
    }
    s
}

pub fn bias_curve_csv(curve: &[BiasPoint]) -> String {
    let mut s = String::from("threshold,bias\n");
    for p in curve {
        let _ = writeln!(s, "{:.3},{:.6}", p.threshold, p.bias);
    }
    s
}

/// Minimal line plot; `y_range` maps onto the vertical axis.
fn svg_plot(title: &str, x_label: &str, y_label: &str, pts: &[(f64, f64)], y_range: (f64, f64)) -> String {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let sx = |x: f64| m + x * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y_range.0) / (y_range.1 - y_range.0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{x_label}</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{y_label}</text>"#,
        h / 2.0,
        h / 2.0
    );
    if !pts.is_empty() {
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn pr_curve_svg(curve: &PrCurve) -> String {
    let mut pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| Some((p.recall?, p.precision?)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    svg_plot("Precision-recall", "recall", "precision", &pts, (0.0, 1.0))
}

pub fn bias_curve_svg(curve: &[BiasPoint]) -> String {
    let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.threshold, p.bias)).collect();
    svg_plot("FP class bias", "confidence threshold", "bias", &pts, (-1.0, 1.0))
}

/// Write `metrics.json`, `pr_curve.csv`, `bias_curve.csv` and both SVG plots.
pub fn write_report(dir: &Path, report: &MetricsReport, curve: &PrCurve) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::json(dir.join("metrics.json"), e))?;
    put("metrics.json", &json)?;
    put("pr_curve.csv", pr_curve_csv(curve).as_bytes())?;
    put("bias_curve.csv", bias_curve_csv(&report.bias_curve).as_bytes())?;
    put("pr_curve.svg", pr_curve_svg(curve).as_bytes())?;
    put("bias_curve.svg", bias_curve_svg(&report.bias_curve).as_bytes())
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}
