//! Forward renderer for defocused particle images (PIs).
//!
//! Each glare point on the particle surface contributes one coherent plane
//! wave across the PI disc. The glare offset `o_k` (dimensionless, inside
//! `[-1, 1]^2`) sets the wave vector: the phase at pixel `p` is
//! `pi * K * (o_k . (p - c)) / R + phi_k`, with `R` the PI radius and `K`
//! the pattern's cycle scale. Intensity is the squared magnitude of the
//! amplitude-weighted sum.
//!
//! * Empty: one glare point, uniform disc.
//! * Regular: two glare points at `+u/2` and `-u/2` with `K = N_f`, which
//!   gives exactly `N_f` cosine cycles across the diameter along `u`.
//! * Speckle: many glare points with random directions and per-point cycle
//!   counts in `[1, 6]` (`K = 6`, `|o_k| = N_k / 6`).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Annotation, BBox, Phase};
use crate::raster::{BitDepth, Raster};

/// Per-point cycle counts for speckle glare points are drawn from `[1, SPECKLE_MAX_CYCLES]`.
pub const SPECKLE_MAX_CYCLES: f64 = 6.0;
pub const DEFAULT_SPECKLE_POINTS: usize = 12;
pub const MIN_DIAMETER: f64 = 3.0;

/// Lattice resolution used to find the brightest point of a speckle field.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Empty,
    Regular,
    Speckle,
}

impl Pattern {
    /// Empty and speckle PIs are tracers; regular fringes mark the dispersed phase.
    pub fn phase(self) -> Phase {
        match self {
            Pattern::Regular => Phase::Dispersed,
            Pattern::Empty | Pattern::Speckle => Phase::Tracer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlarePoint {
    pub offset: [f64; 2],
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlarePointConfig {
    pub points: Vec<GlarePoint>,
}

impl GlarePointConfig {
    pub fn single() -> Self {
        Self {
            points: vec![GlarePoint {
                offset: [0.0, 0.0],
                amplitude: 1.0,
                phase: 0.0,
            }],
        }
    }

    /// Two equal glare points on the line through the origin along `direction`.
    /// `fringe_phase` shifts the fringes across the disc.
    pub fn collinear_pair(direction: f64, fringe_phase: f64) -> Self {
        let u = [0.5 * direction.cos(), 0.5 * direction.sin()];
        Self {
            points: vec![
                GlarePoint {
                    offset: u,
                    amplitude: 1.0,
                    phase: fringe_phase,
                },
                GlarePoint {
                    offset: [-u[0], -u[1]],
                    amplitude: 1.0,
                    phase: 0.0,
                },
            ],
        }
    }

    /// `n` glare points at pseudo-random offsets, amplitudes in `[0.5, 1]`.
    pub fn random_speckle<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let points = (0..n)
            .map(|_| {
                let dir = rng.random_range(0.0..2.0 * PI);
                let cycles = rng.random_range(1.0..=SPECKLE_MAX_CYCLES);
                let r = cycles / SPECKLE_MAX_CYCLES;
                GlarePoint {
                    offset: [r * dir.cos(), r * dir.sin()],
                    amplitude: rng.random_range(0.5..=1.0),
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            })
            .collect();
        Self { points }
    }

    fn total_amplitude(&self) -> f64 {
        self.points.iter().map(|p| p.amplitude).sum()
    }

    fn check(&self, pattern: Pattern) -> Result<()> {
        let bad = |msg: String| Err(Error::DegenerateSpec(msg));
        if self.points.is_empty() {
            return bad("glare configuration has no points".into());
        }
        for p in &self.points {
            if !(p.amplitude >= 0.0) || !p.amplitude.is_finite() {
                return bad(format!("negative or non-finite amplitude {}", p.amplitude));
            }
            if p.offset.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
                return bad(format!("glare offset {:?} outside [-1, 1]^2", p.offset));
            }
        }
        if self.total_amplitude() <= 0.0 {
            return bad("all glare amplitudes are zero".into());
        }
        match pattern {
            Pattern::Empty if self.points.len() != 1 => {
                bad(format!("empty pattern needs 1 glare point, got {}", self.points.len()))
            }
            Pattern::Regular => {
                if self.points.len() != 2 {
                    return bad(format!(
                        "regular pattern needs 2 glare points, got {}",
                        self.points.len()
                    ));
                }
                let (a, b) = (self.points[0].offset, self.points[1].offset);
                let cross = a[0] * b[1] - a[1] * b[0];
                if cross.abs() > 1e-9 {
                    return bad("regular glare points are not collinear with the origin".into());
                }
                if (a[0] - b[0]).hypot(a[1] - b[1]) == 0.0 {
                    return bad("regular glare points coincide".into());
                }
                Ok(())
            }
            Pattern::Speckle if self.points.len() < 3 => bad(format!(
                "speckle pattern needs at least 3 glare points, got {}",
                self.points.len()
            )),
            _ => Ok(()),
        }
    }
}

/// One simulated defocused particle image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleImageSpec {
    pub center: [f64; 2],
    /// PI diameter `d_PI` in pixels.
    pub diameter: f64,
    /// Physical particle size in micrometres; metadata only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particle_size_um: Option<f64>,
    pub pattern: Pattern,
    pub glare: GlarePointConfig,
    /// Fringe cycles across the diameter (regular only, 0 otherwise).
    pub fringe_count: f64,
    pub fringe_direction: f64,
    pub peak_intensity: f64,
}

impl ParticleImageSpec {
    pub fn empty(center: [f64; 2], diameter: f64, peak_intensity: f64) -> Self {
        Self {
            center,
            diameter,
            particle_size_um: None,
            pattern: Pattern::Empty,
            glare: GlarePointConfig::single(),
            fringe_count: 0.0,
            fringe_direction: 0.0,
            peak_intensity,
        }
    }

    pub fn regular(
        center: [f64; 2],
        diameter: f64,
        fringe_count: f64,
        fringe_direction: f64,
        fringe_phase: f64,
        peak_intensity: f64,
    ) -> Self {
        Self {
            center,
            diameter,
            particle_size_um: None,
            pattern: Pattern::Regular,
            glare: GlarePointConfig::collinear_pair(fringe_direction, fringe_phase),
            fringe_count,
            fringe_direction,
            peak_intensity,
        }
    }

    pub fn speckle<R: Rng + ?Sized>(
        center: [f64; 2],
        diameter: f64,
        n_points: usize,
        peak_intensity: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            center,
            diameter,
            particle_size_um: None,
            pattern: Pattern::Speckle,
            glare: GlarePointConfig::random_speckle(n_points, rng),
            fringe_count: 0.0,
            fringe_direction: 0.0,
            peak_intensity,
        }
    }

    pub fn class(&self) -> Phase {
        self.pattern.phase()
    }

    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }

    pub fn bbox(&self) -> BBox {
        BBox::around(self.center, self.radius())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.diameter >= MIN_DIAMETER) {
            return Err(Error::DegenerateSpec(format!(
                "diameter {} px below minimum {MIN_DIAMETER}",
                self.diameter
            )));
        }
        if !(0.0..=1.0).contains(&self.peak_intensity) {
            return Err(Error::DegenerateSpec(format!(
                "peak intensity {} outside [0, 1]",
                self.peak_intensity
            )));
        }
        if !self.fringe_count.is_finite() || self.fringe_count < 0.0 {
            return Err(Error::DegenerateSpec(format!(
                "fringe count {} must be finite and >= 0",
                self.fringe_count
            )));
        }
        match self.pattern {
            Pattern::Regular if self.fringe_count <= 0.0 => {
                return Err(Error::DegenerateSpec(
                    "regular pattern needs a positive fringe count".into(),
                ))
            }
            Pattern::Empty if self.fringe_count != 0.0 => {
                return Err(Error::DegenerateSpec(
                    "empty pattern must have zero fringe count".into(),
                ))
            }
            _ => {}
        }
        self.glare.check(self.pattern)
    }

    fn cycle_scale(&self) -> f64 {
        match self.pattern {
            Pattern::Empty => 0.0,
            Pattern::Regular => self.fringe_count,
            Pattern::Speckle => SPECKLE_MAX_CYCLES,
        }
    }
}

/// Pattern intensity as a function of the offset from the PI center,
/// without the rim taper.
struct Field {
    waves: Vec<([f64; 2], f64, f64)>,
    norm: f64,
    peak: f64,
    saturate: bool,
}

impl Field {
    fn new(spec: &ParticleImageSpec) -> Self {
        let scale = PI * spec.cycle_scale() / spec.radius();
        let waves: Vec<_> = spec
            .glare
            .points
            .iter()
            .map(|g| ([scale * g.offset[0], scale * g.offset[1]], g.amplitude, g.phase))
            .collect();
        let total = spec.glare.total_amplitude();
        let mut field = Field {
            waves,
            norm: total * total,
            peak: spec.peak_intensity,
            saturate: false,
        };
        if spec.pattern == Pattern::Speckle {
            field.norm = spec.glare.points.iter().map(|g| g.amplitude * g.amplitude).sum();
            field.saturate = true;
        }
        field
    }

    #[inline]
    fn raw(&self, dx: f64, dy: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for &(k, a, phi) in &self.waves {
            let arg = k[0] * dx + k[1] * dy + phi;
            re += a * arg.cos();
            im += a * arg.sin();
        }
        re * re + im * im
    }

    #[inline]
    fn intensity(&self, dx: f64, dy: f64) -> f64 {
        let v = self.raw(dx, dy) / self.norm;
        if self.saturate {
            // speckle: normalized to its mean (incoherent) intensity, then
            // compressed so bright grains approach but never pass the peak
            self.peak * (1.0 - (-v).exp())
        } else {
            self.peak * v
        }
    }
}

/// Raised-cosine rim weight, 1 px wide, centered on the disc radius.
#[inline]
fn rim_taper(dist: f64, radius: f64) -> f64 {
    let inner = radius - 0.5;
    if dist <= inner {
        1.0
    } else if dist >= radius + 0.5 {
        0.0
    } else {
        0.5 * (1.0 + (PI * (dist - inner)).cos())
    }
}

/// Adds the PI described by `spec`, centered at `center`, onto `target`.
fn splat(target: &mut Raster, spec: &ParticleImageSpec, center: [f64; 2]) {
    let field = Field::new(spec);
    let r = spec.radius();
    let x0 = (center[0] - r - 1.0).floor().max(0.0) as usize;
    let y0 = (center[1] - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((center[0] + r + 1.0).ceil().max(0.0) as usize).min(target.width());
    let y1 = ((center[1] + r + 1.0).ceil().max(0.0) as usize).min(target.height());
    for y in y0..y1 {
        let dy = y as f64 + 0.5 - center[1];
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - center[0];
            let w = rim_taper(dx.hypot(dy), r);
            if w > 0.0 {
                let v = target.get(x, y) + w * field.intensity(dx, dy);
                target.set(x, y, v);
            }
        }
    }
}

/// Render a single PI centered in an `out_size x out_size` snippet.
/// `spec.center` is ignored; the disc sits at the snippet center.
pub fn render_particle_image(spec: &ParticleImageSpec, out_size: usize) -> Result<Raster> {
    spec.validate()?;
    if (out_size as f64) < spec.diameter {
        return Err(Error::SnippetTooSmall {
            out_size,
            diameter: spec.diameter,
        });
    }
    let mut snippet = Raster::new(out_size, out_size, 0.0);
    let c = 0.5 * out_size as f64;
    splat(&mut snippet, spec, [c, c]);
    Ok(snippet)
}

/// Ground-truth fringe count of a regular PI.
pub fn expected_fringe_count(spec: &ParticleImageSpec) -> Result<f64> {
    match spec.pattern {
        Pattern::Regular => Ok(spec.fringe_count),
        other => Err(Error::NotRegular(other)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendMode {
    #[default]
    AdditiveClamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_depth")]
    pub bit_depth: BitDepth,
    #[serde(default)]
    pub background: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub blend: BlendMode,
}

fn default_depth() -> BitDepth {
    BitDepth::Eight
}

impl SensorModel {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bit_depth: BitDepth::Eight,
            background: 0.0,
            noise_sigma: 0.0,
            blend: BlendMode::AdditiveClamp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter(format!(
                "sensor size {}x{} must be positive",
                self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::InvalidParameter(format!(
                "background {} outside [0, 1]",
                self.background
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_sigma) {
            return Err(Error::InvalidParameter(format!(
                "noise sigma {} outside [0, 1]",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub sensor: SensorModel,
    pub particles: Vec<ParticleImageSpec>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        let (w, h) = (self.sensor.width as f64, self.sensor.height as f64);
        for (i, p) in self.particles.iter().enumerate() {
            p.validate()?;
            let [x, y] = p.center;
            if !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
                return Err(Error::InvalidParameter(format!(
                    "particle {i} center ({x}, {y}) outside {w}x{h} sensor"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    /// Quantized to the sensor bit depth, rescaled to `[0, 1]`.
    pub image: Raster,
    pub bit_depth: BitDepth,
    pub annotations: Vec<Annotation>,
}

/// Adds zero-mean Gaussian noise in raster order and clamps to `[0, 1]`.
pub fn add_noise<R: Rng + ?Sized>(image: &mut Raster, sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        for v in image.data_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

pub fn render_scene(scene: &SceneSpec) -> Result<RenderedScene> {
    scene.validate()?;
    let sensor = &scene.sensor;
    let mut image = Raster::new(sensor.width, sensor.height, sensor.background);
    let mut annotations = Vec::with_capacity(scene.particles.len());
    for p in &scene.particles {
        splat(&mut image, p, p.center);
        if let Some(bbox) = p.bbox().clip(sensor.width as f64, sensor.height as f64) {
            annotations.push(Annotation {
                bbox,
                class: p.class(),
                source: None,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    add_noise(&mut image, sensor.noise_sigma, &mut rng);
    Ok(RenderedScene {
        image: image.quantized(sensor.bit_depth),
        bit_depth: sensor.bit_depth,
        annotations,
    })
}

/// Parameters for drawing random PIs, used for synthetic scenes and
/// simulated snippet pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternSampler {
    pub diameter: [f64; 2],
    /// Fringe cycle range for regular PIs.
    pub fringe_count: [f64; 2],
    /// Fringes are never denser than this period (px).
    pub min_fringe_period: f64,
    pub peak_intensity: [f64; 2],
    /// Fraction of tracers drawn as speckle (the rest are empty).
    pub speckle_fraction: f64,
    pub speckle_points: usize,
}

impl Default for PatternSampler {
    fn default() -> Self {
        Self {
            diameter: [19.0, 120.0],
            fringe_count: [3.0, 10.0],
            min_fringe_period: 4.0,
            peak_intensity: [0.6, 1.0],
            speckle_fraction: 0.5,
            speckle_points: DEFAULT_SPECKLE_POINTS,
        }
    }
}

impl PatternSampler {
    pub fn validate(&self) -> Result<()> {
        let ok = self.diameter[0] >= MIN_DIAMETER
            && self.diameter[0] <= self.diameter[1]
            && self.fringe_count[0] > 0.0
            && self.fringe_count[0] <= self.fringe_count[1]
            && self.min_fringe_period > 0.0
            && 0.0 <= self.peak_intensity[0]
            && self.peak_intensity[0] <= self.peak_intensity[1]
            && self.peak_intensity[1] <= 1.0
            && (0.0..=1.0).contains(&self.speckle_fraction)
            && self.speckle_points >= 3;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid pattern sampler {self:?}"
            )))
        }
    }

    fn range<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
        if r[1] > r[0] {
            rng.random_range(r[0]..=r[1])
        } else {
            r[0]
        }
    }

    /// Draw a PI of the requested phase with the given diameter.
    pub fn sample_with_diameter<R: Rng + ?Sized>(
        &self,
        phase: Phase,
        center: [f64; 2],
        diameter: f64,
        rng: &mut R,
    ) -> ParticleImageSpec {
        let peak = Self::range(rng, self.peak_intensity);
        match phase {
            Phase::Dispersed => {
                let hi = self.fringe_count[1]
                    .min(diameter / self.min_fringe_period)
                    .max(self.fringe_count[0]);
                let n_f = Self::range(rng, [self.fringe_count[0], hi]);
                let dir = rng.random_range(0.0..PI);
                let phi = rng.random_range(0.0..2.0 * PI);
                ParticleImageSpec::regular(center, diameter, n_f, dir, phi, peak)
            }
            Phase::Tracer => {
                if rng.random_bool(self.speckle_fraction) {
                    ParticleImageSpec::speckle(center, diameter, self.speckle_points, peak, rng)
                } else {
                    ParticleImageSpec::empty(center, diameter, peak)
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        phase: Phase,
        center: [f64; 2],
        rng: &mut R,
    ) -> ParticleImageSpec {
        let d = Self::range(rng, self.diameter);
        self.sample_with_diameter(phase, center, d, rng)
    }
}

/// Random scene of `tracers + dispersed` PIs, fully inside the sensor.
/// With `non_overlapping`, discs never touch (rejection sampling).
pub fn random_scene(
    sensor: &SensorModel,
    sampler: &PatternSampler,
    tracers: usize,
    dispersed: usize,
    non_overlapping: bool,
    seed: u64,
) -> Result<SceneSpec> {
    sensor.validate()?;
    sampler.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (sensor.width as f64, sensor.height as f64);
    let mut phases: Vec<Phase> = std::iter::repeat_n(Phase::Tracer, tracers)
        .chain(std::iter::repeat_n(Phase::Dispersed, dispersed))
        .collect();
    // interleave classes so neither gets systematically placed first
    for i in (1..phases.len()).rev() {
        let j = rng.random_range(0..=i);
        phases.swap(i, j);
    }
    let mut particles: Vec<ParticleImageSpec> = Vec::with_capacity(phases.len());
    const MAX_ATTEMPTS: usize = 1000;
    for phase in phases {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let d = PatternSampler::range(&mut rng, sampler.diameter);
            let r = 0.5 * d + 1.0;
            if 2.0 * r >= w || 2.0 * r >= h {
                return Err(Error::InvalidParameter(format!(
                    "PI diameter {d} does not fit a {w}x{h} sensor"
                )));
            }
            let c = [rng.random_range(r..w - r), rng.random_range(r..h - r)];
            let bb = BBox::around(c, 0.5 * d);
            let clash = non_overlapping
                && particles.iter().any(|q| {
                    let min_gap = q.radius() + 0.5 * d + 2.0;
                    (q.center[0] - c[0]).hypot(q.center[1] - c[1]) < min_gap
                        || iou(&q.bbox(), &bb) > 0.0
                });
            if !clash {
                particles.push(sampler.sample_with_diameter(phase, c, d, &mut rng));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PlacementSaturation {
                attempts: MAX_ATTEMPTS,
                width: sensor.width,
                height: sensor.height,
                policy: "non-overlapping scene".into(),
            });
        }
    }
    Ok(SceneSpec {
        sensor: sensor.clone(),
        particles,
        seed: rng.random(),
    })
}

/// Render one random PI of `phase` filling an `out_size` snippet
/// (`d_PI = out_size`), with optional sensor noise.
pub fn simulate_snippet<R: Rng + ?Sized>(
    sampler: &PatternSampler,
    phase: Phase,
    out_size: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<(Raster, ParticleImageSpec)> {
    let c = 0.5 * out_size as f64;
    let spec = sampler.sample_with_diameter(phase, [c, c], out_size as f64, rng);
    let mut img = render_particle_image(&spec, out_size)?;
    add_noise(&mut img, noise_sigma, rng);
    Ok((img, spec))
}
