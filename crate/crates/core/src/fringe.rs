//! Spectral tracer/dispersed-phase classifier.
//!
//! Dispersed-phase PIs carry unidirectional fringes, which show up as a
//! pair of point-symmetric lobes in the 2-D spectrum. Tracers (empty or
//! speckle patterns) have either no energy outside the low-frequency core
//! or an isotropic spread of it. Three features capture this and a
//! three-threshold conjunction decides the class.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Phase;
use crate::raster::Raster;

/// Bins with radius up to this value (DC included) form the low-frequency core.
pub const CORE_RADIUS: f64 = 2.0;
pub const ANISOTROPY_STEP: f64 = 0.02;
pub const DC_FRACTION_STEP: f64 = 0.02;
pub const PEAK_RATIO_STEP: f64 = 1.25;
pub const MIN_CALIBRATION_PER_CLASS: usize = 10;

const PEAK_RATIO_GRID: usize = 61;
const CONFIDENCE_SLOPE: f64 = 0.5;
const MAX_RATIO: f64 = 1e12;
const RING_SAMPLES: usize = 64;
const REFINE_STEPS: [f64; 3] = [0.5, 0.125, 0.03125];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternFeatures {
    /// Share of spectral energy in the low-frequency core.
    pub dc_fraction: f64,
    /// Energy-weighted resultant length of doubled bin angles.
    pub anisotropy: f64,
    /// Radius of the strongest non-core bin, cycles per snippet.
    pub peak_freq: f64,
    /// Direction of that bin in `[0, pi)`, image axes (x right, y down).
    pub peak_dir: f64,
    /// Peak magnitude over the median spectral magnitude on the circle
    /// through the peak.
    pub peak_to_median: f64,
}

fn fft2(n: usize, data: &mut [Complex<f64>]) {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = data[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            data[y * n + x] = col[y];
        }
    }
}

#[inline]
fn signed(idx: usize, n: usize) -> i64 {
    if idx < n.div_ceil(2) {
        idx as i64
    } else {
        idx as i64 - n as i64
    }
}

#[inline]
fn in_half_plane(kx: i64, ky: i64) -> bool {
    ky > 0 || (ky == 0 && kx > 0)
}

/// DFT magnitudes at `RING_SAMPLES` angles over `[0, pi)` on the circle of
/// radius `r` cycles per snippet, evaluated off-grid.
fn ring_magnitudes(v: &[f64], n: usize, r: f64) -> Vec<f64> {
    let mut ex = vec![Complex::new(0.0, 0.0); n];
    let mut ey = vec![Complex::new(0.0, 0.0); n];
    (0..RING_SAMPLES)
        .map(|k| {
            let theta = PI * k as f64 / RING_SAMPLES as f64;
            dft_at(v, n, r * theta.cos(), r * theta.sin(), &mut ex, &mut ey).norm()
        })
        .collect()
}

/// Direct DFT of an `n x n` image at an off-grid frequency (cycles per snippet).
fn dft_at(v: &[f64], n: usize, fx: f64, fy: f64, ex: &mut [Complex<f64>], ey: &mut [Complex<f64>]) -> Complex<f64> {
    for i in 0..n {
        ex[i] = Complex::from_polar(1.0, -2.0 * PI * fx * i as f64 / n as f64);
        ey[i] = Complex::from_polar(1.0, -2.0 * PI * fy * i as f64 / n as f64);
    }
    let mut acc = Complex::new(0.0, 0.0);
    for (row, &wy) in v.chunks_exact(n).zip(ey.iter()) {
        let s: Complex<f64> = row.iter().zip(ex.iter()).map(|(&p, &wx)| wx * p).sum();
        acc += wy * s;
    }
    acc
}

/// Windowed image minus its least-squares multiple of the window, which
/// removes the aperture lobe around DC.
fn detrended(windowed: &[f64], window: &[f64]) -> Vec<f64> {
    let ww: f64 = window.iter().map(|w| w * w).sum();
    let m = if ww > 0.0 {
        windowed.iter().zip(window).map(|(v, w)| v * w).sum::<f64>() / ww
    } else {
        0.0
    };
    windowed.iter().zip(window).map(|(v, w)| v - m * w).collect()
}

/// Local maximum of the off-grid spectral magnitude near bin `(kx, ky)`,
/// by successively finer 5x5 grid searches.
fn refine_peak(v: &[f64], n: usize, kx: f64, ky: f64) -> (f64, f64) {
    let mut ex = vec![Complex::new(0.0, 0.0); n];
    let mut ey = vec![Complex::new(0.0, 0.0); n];
    let (mut bx, mut by) = (kx, ky);
    for step in REFINE_STEPS {
        let (cx, cy) = (bx, by);
        let mut best = f64::NEG_INFINITY;
        for j in -2..=2 {
            for i in -2..=2 {
                let (fx, fy) = (cx + i as f64 * step, cy + j as f64 * step);
                let m = dft_at(v, n, fx, fy, &mut ex, &mut ey).norm_sqr();
                if m > best {
                    best = m;
                    (bx, by) = (fx, fy);
                }
            }
        }
    }
    (bx, by)
}

/// Spectral pattern features of a square snippet, after a radial Hann window.
pub fn compute_features(snippet: &Raster) -> Result<PatternFeatures> {
    let n = snippet.width();
    if n != snippet.height() || n < 8 {
        return Err(Error::DegenerateInput(format!(
            "snippet must be square and at least 8 px, got {}x{}",
            snippet.width(),
            snippet.height()
        )));
    }
    if snippet.data().iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateInput("all-zero snippet".into()));
    }
    if snippet.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite pixel values".into()));
    }

    let half = 0.5 * n as f64;
    let mut window = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let r = (x as f64 + 0.5 - half).hypot(y as f64 + 0.5 - half);
            window.push(if r < half {
                0.5 * (1.0 + (PI * r / half).cos())
            } else {
                0.0
            });
        }
    }
    let windowed: Vec<f64> = window.iter().zip(snippet.data()).map(|(w, p)| w * p).collect();
    let mut buf: Vec<Complex<f64>> = windowed.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(n, &mut buf);

    let core2 = CORE_RADIUS * CORE_RADIUS;
    let mut total_energy = 0.0;
    let mut core_energy = 0.0;
    let (mut sum_e, mut res_re, mut res_im) = (0.0, 0.0, 0.0);
    let mut peak: Option<(f64, i64, i64)> = None;
    for iy in 0..n {
        let ky = signed(iy, n);
        for ix in 0..n {
            let kx = signed(ix, n);
            let f = buf[iy * n + ix];
            let e = f.norm_sqr();
            total_energy += e;
            let r2 = (kx * kx + ky * ky) as f64;
            if r2 <= core2 {
                core_energy += e;
                continue;
            }
            if !in_half_plane(kx, ky) {
                continue;
            }
            let theta = (ky as f64).atan2(kx as f64);
            sum_e += e;
            res_re += e * (2.0 * theta).cos();
            res_im += e * (2.0 * theta).sin();
            if peak.is_none_or(|(pe, _, _)| e > pe) {
                peak = Some((e, kx, ky));
            }
        }
    }
    if !(total_energy > 0.0) {
        return Err(Error::DegenerateInput("snippet has no spectral energy".into()));
    }
    let dc_fraction = (core_energy / total_energy).clamp(0.0, 1.0);
    let anisotropy = if sum_e > 0.0 {
        (res_re.hypot(res_im) / sum_e).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let Some((peak_e, pkx, pky)) = peak else {
        return Ok(PatternFeatures {
            dc_fraction,
            anisotropy,
            peak_freq: 0.0,
            peak_dir: 0.0,
            peak_to_median: 1.0,
        });
    };

    let (fx, fy) = refine_peak(&detrended(&windowed, &window), n, pkx as f64, pky as f64);
    let peak_freq = fx.hypot(fy);
    let peak_dir = fy.atan2(fx).rem_euclid(PI);

    let ring_r = ((pkx * pkx + pky * pky) as f64).sqrt();
    let mut ring = ring_magnitudes(&windowed, n, ring_r);
    ring.sort_by(f64::total_cmp);
    let median = 0.5 * (ring[RING_SAMPLES / 2 - 1] + ring[RING_SAMPLES / 2]);
    let peak_m = peak_e.sqrt();
    let peak_to_median = if median > 0.0 {
        (peak_m / median).min(MAX_RATIO)
    } else {
        MAX_RATIO
    };

    Ok(PatternFeatures {
        dc_fraction,
        anisotropy,
        peak_freq,
        peak_dir,
        peak_to_median,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierThresholds {
    pub anisotropy_min: f64,
    pub peak_to_median_min: f64,
    pub dc_fraction_max: f64,
}

impl Default for ClassifierThresholds {
    fn default() -> Self {
        Self {
            anisotropy_min: 0.7,
            peak_to_median_min: 10.0,
            dc_fraction_max: 0.9,
        }
    }
}

impl ClassifierThresholds {
    pub fn validate(&self) -> Result<()> {
        if [self.anisotropy_min, self.peak_to_median_min, self.dc_fraction_max]
            .iter()
            .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("non-finite thresholds {self:?}")))
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: Phase,
    pub confidence: f64,
}

/// Signed margins of the three criteria, each in grid-step units
/// (positive means the criterion for "dispersed" holds).
fn margins(f: &PatternFeatures, t: &ClassifierThresholds) -> [f64; 3] {
    let ratio = if t.peak_to_median_min > 0.0 && f.peak_to_median > 0.0 {
        (f.peak_to_median / t.peak_to_median_min).ln() / PEAK_RATIO_STEP.ln()
    } else if f.peak_to_median >= t.peak_to_median_min {
        f64::INFINITY
    } else {
        f64::NEG_INFINITY
    };
    [
        (f.anisotropy - t.anisotropy_min) / ANISOTROPY_STEP,
        ratio,
        (t.dc_fraction_max - f.dc_fraction) / DC_FRACTION_STEP,
    ]
}

/// Dispersed iff all three criteria hold (boundary counts as dispersed).
/// Confidence is a logistic of the smallest margin, `0.5` at the boundary.
pub fn classify(features: &PatternFeatures, thresholds: &ClassifierThresholds) -> Classification {
    let dispersed = features.anisotropy >= thresholds.anisotropy_min
        && features.peak_to_median >= thresholds.peak_to_median_min
        && features.dc_fraction <= thresholds.dc_fraction_max;
    let binding = margins(features, thresholds)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let confidence = if binding.is_finite() {
        1.0 / (1.0 + (-CONFIDENCE_SLOPE * binding.abs()).exp())
    } else {
        1.0
    };
    Classification {
        class: if dispersed {
            Phase::Dispersed
        } else {
            Phase::Tracer
        },
        confidence,
    }
}

pub fn classify_snippet(snippet: &Raster, thresholds: &ClassifierThresholds) -> Result<Classification> {
    Ok(classify(&compute_features(snippet)?, thresholds))
}

struct Grid {
    anisotropy: Vec<f64>,
    ratio: Vec<f64>,
    dc: Vec<f64>,
}

impl Grid {
    fn new() -> Self {
        let steps = (1.0 / ANISOTROPY_STEP).round() as usize;
        Self {
            anisotropy: (0..=steps).map(|i| i as f64 * ANISOTROPY_STEP).collect(),
            ratio: (0..PEAK_RATIO_GRID as i32).map(|i| PEAK_RATIO_STEP.powi(i)).collect(),
            dc: (0..=steps).map(|i| i as f64 * DC_FRACTION_STEP).collect(),
        }
    }

    /// Cell indices of a sample: it satisfies `anisotropy >= grid_a[i]` for
    /// all `i <= ia` (likewise for the ratio) and `dc <= grid_d[k]` for all
    /// `k >= id`. `None` for `ia`/`ip` means it fails every grid value.
    fn cell(&self, f: &PatternFeatures) -> (Option<usize>, Option<usize>, usize) {
        let last_le = |g: &[f64], v: f64| g.partition_point(|&x| x <= v).checked_sub(1);
        let ia = last_le(&self.anisotropy, f.anisotropy);
        let ip = last_le(&self.ratio, f.peak_to_median);
        let id = self.dc.partition_point(|&x| x < f.dc_fraction);
        (ia, ip, id)
    }
}

/// Grid search maximizing balanced accuracy. Ties go to the largest tracer
/// region: highest anisotropy and ratio thresholds, then lowest dc cap.
pub fn calibrate_thresholds(samples: &[(PatternFeatures, Phase)]) -> Result<ClassifierThresholds> {
    let n_t = samples.iter().filter(|s| s.1 == Phase::Tracer).count();
    let n_d = samples.len() - n_t;
    if n_t < MIN_CALIBRATION_PER_CLASS || n_d < MIN_CALIBRATION_PER_CLASS {
        return Err(Error::Calibration {
            min: MIN_CALIBRATION_PER_CLASS,
            tracers: n_t,
            dispersed: n_d,
        });
    }
    let grid = Grid::new();
    let (na, np, nd) = (grid.anisotropy.len(), grid.ratio.len(), grid.dc.len());
    let idx = |a: usize, p: usize, d: usize| (a * np + p) * nd + d;

    // counts[c][cell]: after the cumulative passes below, the number of
    // class-c samples predicted dispersed by thresholds (a, p, d).
    let mut counts = [vec![0u64; na * np * nd], vec![0u64; na * np * nd]];
    for (f, class) in samples {
        if let (Some(ia), Some(ip), id) = grid.cell(f) {
            if id < nd {
                counts[class.index()][idx(ia, ip, id)] += 1;
            }
        }
    }
    for c in &mut counts {
        for a in (0..na).rev() {
            for p in (0..np).rev() {
                for d in 0..nd {
                    let mut v = c[idx(a, p, d)];
                    if a + 1 < na {
                        v += c[idx(a + 1, p, d)];
                    }
                    if p + 1 < np {
                        v += c[idx(a, p + 1, d)];
                    }
                    if a + 1 < na && p + 1 < np {
                        v -= c[idx(a + 1, p + 1, d)];
                    }
                    c[idx(a, p, d)] = v;
                }
            }
        }
        for a in 0..na {
            for p in 0..np {
                for d in 1..nd {
                    c[idx(a, p, d)] += c[idx(a, p, d - 1)];
                }
            }
        }
    }

    // balanced accuracy scaled by 2 * n_t * n_d, kept integral for exact ties
    let (nt, ndisp) = (n_t as u64, n_d as u64);
    let mut best: Option<(u64, usize, usize, usize)> = None;
    for a in 0..na {
        for p in 0..np {
            for d in 0..nd {
                let i = idx(a, p, d);
                let tp = counts[Phase::Dispersed.index()][i];
                let fp = counts[Phase::Tracer.index()][i];
                let score = tp * nt + (nt - fp) * ndisp;
                let better = match best {
                    None => true,
                    Some((s, ba, bp, bd)) => {
                        score > s || (score == s && (a, p, std::cmp::Reverse(d)) > (ba, bp, std::cmp::Reverse(bd)))
                    }
                };
                if better {
                    best = Some((score, a, p, d));
                }
            }
        }
    }
    let (_, a, p, d) = best.expect("grid is non-empty");
    Ok(ClassifierThresholds {
        anisotropy_min: grid.anisotropy[a],
        peak_to_median_min: grid.ratio[p],
        dc_fraction_max: grid.dc[d],
    })
}

/// Fraction of samples whose predicted class matches the label, averaged per class.
pub fn balanced_accuracy(samples: &[(PatternFeatures, Phase)], t: &ClassifierThresholds) -> f64 {
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for (f, c) in samples {
        total[c.index()] += 1;
        if classify(f, t).class == *c {
            correct[c.index()] += 1;
        }
    }
    let rate = |i: usize| {
        if total[i] == 0 {
            1.0
        } else {
            correct[i] as f64 / total[i] as f64
        }
    };
    0.5 * (rate(0) + rate(1))
}
