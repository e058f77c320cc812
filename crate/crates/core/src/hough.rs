//! Gradient-directed circular Hough transform for bright defocused discs.
//!
//! The image is reduced to a smooth foreground mask first: threshold above
//! the median background, a binary disc closing that bridges dark fringes
//! and speckle gaps, then a Gaussian blur. Thin Sobel edges of the mask vote,
//! per candidate radius, at the point one radius along their gradient.
//! Votes are pooled over a square whose size grows with the radius and are
//! divided by the circumference, so a complete rim scores about 1 regardless
//! of size. Peaks are local maxima over position and radius; close
//! duplicates are suppressed greedily.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::{Snippet, SnippetOrigin};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Phase};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoughParams {
    pub r_min: f64,
    pub r_max: f64,
    pub r_step: f64,
    /// Minimum Sobel gradient magnitude (intensity per px) for an edge.
    pub gradient_threshold: f64,
    /// Minimum normalized vote count for a circle.
    pub peak_threshold: f64,
    pub min_center_distance: f64,
    /// Intensity above the median background that counts as foreground.
    pub foreground_level: f64,
    /// Radius of the disc closing of the foreground mask (px); bridges dark
    /// fringes and speckle gaps. 0 disables.
    pub closing_radius: f64,
}

impl Default for HoughParams {
    fn default() -> Self {
        Self {
            r_min: 9.0,
            r_max: 61.0,
            r_step: 1.0,
            gradient_threshold: 0.08,
            peak_threshold: 0.3,
            min_center_distance: 9.0,
            foreground_level: 0.04,
            closing_radius: 12.0,
        }
    }
}

impl HoughParams {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !(self.r_min >= 1.0 && self.r_min <= self.r_max)
            || !(self.r_step > 0.0)
            || !unit.contains(&self.gradient_threshold)
            || !unit.contains(&self.peak_threshold)
            || !(self.min_center_distance >= 0.0)
            || !unit.contains(&self.foreground_level)
            || !(self.closing_radius >= 0.0)
        {
            return Err(Error::InvalidParameter(format!(
                "invalid Hough parameters {self:?}"
            )));
        }
        Ok(())
    }

    fn radii(&self) -> Vec<f64> {
        let n = ((self.r_max - self.r_min) / self.r_step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.r_min + i as f64 * self.r_step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetClass {
    Tracer,
    Dispersed,
    Unknown,
}

impl From<Phase> for DetClass {
    fn from(p: Phase) -> Self {
        match p {
            Phase::Tracer => DetClass::Tracer,
            Phase::Dispersed => DetClass::Dispersed,
        }
    }
}

impl DetClass {
    pub fn phase(self) -> Option<Phase> {
        match self {
            DetClass::Tracer => Some(Phase::Tracer),
            DetClass::Dispersed => Some(Phase::Dispersed),
            DetClass::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: DetClass,
    pub confidence: f64,
}

#[derive(Clone, Copy)]
struct Edge {
    x: f64,
    y: f64,
    ux: f64,
    uy: f64,
}

const FAR: f64 = 1e20;
const MASK_BLUR_SIGMA: f64 = 2.5;
const POOL_FRACTION: f64 = 0.05;

/// 1-D squared distance transform of sampled function `f` (lower envelope
/// of parabolas).
fn envelope_pass(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` one.
fn distance_sq(mask: &[bool], w: usize, h: usize) -> Vec<f64> {
    let n = w.max(h);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut cols = vec![0.0; w * h];
    let (mut f, mut o) = (vec![0.0; h], vec![0.0; h]);
    for x in 0..w {
        for y in 0..h {
            f[y] = if mask[y * w + x] { 0.0 } else { FAR };
        }
        envelope_pass(&f, &mut o, &mut v, &mut z);
        for y in 0..h {
            cols[y * w + x] = o[y];
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        envelope_pass(&cols[y * w..(y + 1) * w], &mut out[y * w..(y + 1) * w], &mut v, &mut z);
    }
    out
}

/// Binary closing with a disc of radius `r`.
fn close_mask(mask: &[bool], w: usize, h: usize, r: f64) -> Vec<bool> {
    let r2 = r * r;
    let dilated: Vec<bool> = distance_sq(mask, w, h).into_iter().map(|d| d <= r2).collect();
    let outside: Vec<bool> = dilated.iter().map(|&b| !b).collect();
    distance_sq(&outside, w, h).into_iter().map(|d| d > r2).collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Foreground (`level` above the median background), closed by a disc and
/// blurred so rim normals are not quantized.
fn foreground(img: &Raster, level: f64, closing_radius: f64) -> Raster {
    let (w, h) = (img.width(), img.height());
    let smooth = gaussian_blur(img, 1.0);
    let t = median(smooth.data()) + level;
    let mut mask: Vec<bool> = smooth.data().iter().map(|&v| v > t).collect();
    if closing_radius > 0.0 {
        mask = close_mask(&mask, w, h, closing_radius);
    }
    let m = Raster::from_fn(w, h, |x, y| if mask[y * w + x] { 1.0 } else { 0.0 });
    gaussian_blur(&m, MASK_BLUR_SIGMA)
}

/// Separable Gaussian blur, clamped at the borders.
fn gaussian_blur(img: &Raster, sigma: f64) -> Raster {
    let rad = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (w, h) = (img.width() as isize, img.height() as isize);
    let at = |i: isize, n: isize| i.clamp(0, n - 1) as usize;
    let rows = Raster::from_fn(w as usize, h as usize, |x, y| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * img.get(at(x as isize + j as isize - rad, w), y))
            .sum()
    });
    Raster::from_fn(w as usize, h as usize, |x, y| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * rows.get(x, at(y as isize + j as isize - rad, h)))
            .sum()
    })
}

/// Sobel gradients scaled so a unit step spread over one pixel reads 1.
fn sobel(img: &Raster) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width(), img.height());
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let p = |dx: isize, dy: isize| {
                img.get((x as isize + dx) as usize, (y as isize + dy) as usize)
            };
            let sx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let sy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            gx[y * w + x] = sx / 4.0;
            gy[y * w + x] = sy / 4.0;
        }
    }
    (gx, gy)
}

/// Edge pixels above threshold that are maxima along their gradient.
fn thin_edges(img: &Raster, threshold: f64) -> Vec<Edge> {
    let (w, h) = (img.width(), img.height());
    let (gx, gy) = sobel(img);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let mut edges = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let m = mag[i];
            if m < threshold || m <= 0.0 {
                continue;
            }
            let (ux, uy) = (gx[i] / m, gy[i] / m);
            // nearest of the four neighbour directions
            let sx = ux.round() as isize;
            let sy = uy.round() as isize;
            let fwd = mag[((y as isize + sy) as usize) * w + (x as isize + sx) as usize];
            let back = mag[((y as isize - sy) as usize) * w + (x as isize - sx) as usize];
            if m >= fwd && m > back {
                edges.push(Edge {
                    x: x as f64 + 0.5,
                    y: y as f64 + 0.5,
                    ux,
                    uy,
                });
            }
        }
    }
    edges
}

struct Layer {
    votes: Vec<f32>,
    score: Vec<f32>,
}

/// Half-width of the square vote pool; grows with radius to absorb rim
/// direction error.
fn pool_half_width(r: f64) -> usize {
    ((POOL_FRACTION * r).round() as usize).max(1)
}

fn vote_layer(edges: &[Edge], r: f64, w: usize, h: usize) -> Layer {
    let mut votes = vec![0f32; w * h];
    for e in edges {
        let cx = e.x + r * e.ux;
        let cy = e.y + r * e.uy;
        if cx >= 0.0 && cy >= 0.0 {
            let (ix, iy) = (cx as usize, cy as usize);
            if ix < w && iy < h {
                votes[iy * w + ix] += 1.0;
            }
        }
    }
    let k = pool_half_width(r);
    let mut rows = vec![0f32; w * h];
    for y in 0..h {
        let row = &votes[y * w..(y + 1) * w];
        let mut acc: f32 = row[..(k + 1).min(w)].iter().sum();
        for x in 0..w {
            rows[y * w + x] = acc;
            if x + k + 1 < w {
                acc += row[x + k + 1];
            }
            if x >= k {
                acc -= row[x - k];
            }
        }
    }
    let norm = (1.0 / (2.0 * PI * r)) as f32;
    let mut score = vec![0f32; w * h];
    for x in 0..w {
        let mut acc = 0f32;
        for y in 0..(k + 1).min(h) {
            acc += rows[y * w + x];
        }
        for y in 0..h {
            score[y * w + x] = acc * norm;
            if y + k + 1 < h {
                acc += rows[(y + k + 1) * w + x];
            }
            if y >= k {
                acc -= rows[(y - k) * w + x];
            }
        }
    }
    Layer { votes, score }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    cx: f64,
    cy: f64,
    r: f64,
    conf: f64,
}

fn layer_peaks(
    prev: Option<&Layer>,
    cur: &Layer,
    next: Option<&Layer>,
    r: f64,
    w: usize,
    h: usize,
    threshold: f64,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let s = cur.score[i];
            if (s as f64) < threshold || s <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    let later = j > i;
                    if j != i {
                        let v = cur.score[j];
                        // ties resolve to the first cell in raster order
                        if v > s || (v == s && !later) {
                            is_max = false;
                            break 'nb;
                        }
                    }
                    if prev.is_some_and(|l| l.score[j] > s) || next.is_some_and(|l| l.score[j] >= s)
                    {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let (mut sw, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
            let k = pool_half_width(r);
            for ny in y.saturating_sub(k)..(y + k + 1).min(h) {
                for nx in x.saturating_sub(k)..(x + k + 1).min(w) {
                    let v = cur.votes[ny * w + nx] as f64;
                    sw += v;
                    sx += v * (nx as f64 + 0.5);
                    sy += v * (ny as f64 + 0.5);
                }
            }
            out.push(Candidate {
                cx: sx / sw,
                cy: sy / sw,
                r,
                conf: (s as f64).min(1.0),
            });
        }
    }
    out
}

/// Detect bright circular particle images. Results carry class
/// [`DetClass::Unknown`], are sorted by confidence (descending) and their
/// centers are at least `min_center_distance` apart.
pub fn detect_circles(image: &Raster, params: &HoughParams) -> Result<Vec<Detection>> {
    params.validate()?;
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 {
        return Ok(Vec::new());
    }
    if params.r_max >= 0.5 * w.min(h) as f64 {
        return Err(Error::InvalidParameter(format!(
            "r_max {} must be below half the smaller image side ({}x{})",
            params.r_max, w, h
        )));
    }
    let fg = foreground(image, params.foreground_level, params.closing_radius);
    let edges = thin_edges(&fg, params.gradient_threshold);
    if edges.is_empty() {
        return Ok(Vec::new());
    }
    let radii = params.radii();
    const CHUNK: usize = 8;
    let starts: Vec<usize> = (0..radii.len()).step_by(CHUNK).collect();
    let mut candidates: Vec<Candidate> = starts
        .par_iter()
        .flat_map_iter(|&start| {
            let end = (start + CHUNK).min(radii.len());
            let layer = |k: usize| vote_layer(&edges, radii[k], w, h);
            let mut prev = (start > 0).then(|| layer(start - 1));
            let mut cur = layer(start);
            let mut found = Vec::new();
            for k in start..end {
                let next = (k + 1 < radii.len()).then(|| layer(k + 1));
                found.extend(layer_peaks(
                    prev.as_ref(),
                    &cur,
                    next.as_ref(),
                    radii[k],
                    w,
                    h,
                    params.peak_threshold,
                ));
                match next {
                    Some(n) => {
                        prev = Some(std::mem::replace(&mut cur, n));
                    }
                    None => break,
                }
            }
            found
        })
        .collect();

    candidates.sort_by(|a, b| {
        b.conf
            .total_cmp(&a.conf)
            .then(b.r.total_cmp(&a.r))
            .then(a.cy.total_cmp(&b.cy))
            .then(a.cx.total_cmp(&b.cx))
    });
    let mut kept: Vec<Candidate> = Vec::new();
    for c in candidates {
        if kept
            .iter()
            .all(|k| (k.cx - c.cx).hypot(k.cy - c.cy) >= params.min_center_distance)
        {
            kept.push(c);
        }
    }
    Ok(kept
        .into_iter()
        .map(|c| Detection {
            bbox: BBox::around([c.cx, c.cy], c.r),
            class: DetClass::Unknown,
            confidence: c.conf,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapMode {
    /// Remove every detection that overlaps another one (snippet extraction).
    DropBoth,
    /// Greedy NMS: keep the higher-confidence member of each overlapping pair.
    KeepBest,
}

/// Overlap filtering over detections sorted by descending confidence.
pub fn filter_overlaps(dets: &[Detection], iou_thr: f64, mode: OverlapMode) -> Vec<Detection> {
    match mode {
        OverlapMode::DropBoth => {
            let mut drop = vec![false; dets.len()];
            for i in 0..dets.len() {
                for j in i + 1..dets.len() {
                    if iou(&dets[i].bbox, &dets[j].bbox) > iou_thr {
                        drop[i] = true;
                        drop[j] = true;
                    }
                }
            }
            dets.iter()
                .zip(drop)
                .filter(|(_, d)| !d)
                .map(|(d, _)| *d)
                .collect()
        }
        OverlapMode::KeepBest => {
            let mut kept: Vec<Detection> = Vec::new();
            for d in dets {
                if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thr) {
                    kept.push(*d);
                }
            }
            kept
        }
    }
}

/// Crop each detection and resample it to `out_size x out_size` (bilinear).
/// Detections whose box leaves the image are discarded.
pub fn extract_snippets(
    image: &Raster,
    dets: &[Detection],
    out_size: usize,
    source_image: Option<&str>,
) -> Vec<Snippet> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    dets.iter()
        .filter(|d| d.bbox.is_valid() && d.bbox.inside(w, h))
        .map(|d| Snippet {
            image: image.crop_resample(&d.bbox, out_size, out_size),
            bbox: BBox::new(0.0, 0.0, out_size as f64, out_size as f64),
            native_radius: 0.5 * d.bbox.width().min(d.bbox.height()),
            origin: Some(SnippetOrigin {
                image: source_image.map(str::to_owned),
                bbox: d.bbox,
            }),
        })
        .collect()
}
