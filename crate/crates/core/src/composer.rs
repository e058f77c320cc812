//! Auto-labeled mixed-phase datasets from single-phase snippet pools.
//!
//! Each pool holds snippets of one known class (extracted from single-phase
//! recordings, rendered by the simulator, or ingested from an external
//! generator). Snippets are masked to their inscribed circle, randomly
//! resized, and pasted into empty canvases; the pasted box and the pool's
//! class become the label.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{iou, split_seed, Annotation, BBox, Phase, SnippetRef};
use crate::optics::add_noise;
use crate::raster::{BitDepth, Raster};

pub const SNIPPET_SIZE: usize = 64;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Extracted,
    Simulated,
    Ingested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetOrigin {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snippet {
    pub image: Raster,
    /// PI box in snippet coordinates.
    pub bbox: BBox,
    /// PI radius in the image it came from, px.
    pub native_radius: f64,
    pub origin: Option<SnippetOrigin>,
}

impl Snippet {
    /// Snippet whose PI fills the whole frame.
    pub fn full_frame(image: Raster, native_radius: f64) -> Self {
        let bbox = BBox::new(0.0, 0.0, image.width() as f64, image.height() as f64);
        Self {
            image,
            bbox,
            native_radius,
            origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnippetPool {
    pub class: Phase,
    pub provenance: Provenance,
    pub snippets: Vec<Snippet>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolManifestLine {
    file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_bbox: Option<BBox>,
    bbox: BBox,
    class: Phase,
    native_radius: f64,
    provenance: Provenance,
}

impl SnippetPool {
    pub fn new(class: Phase, provenance: Provenance) -> Self {
        Self {
            class,
            provenance,
            snippets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.snippets.first() else {
            return Ok(());
        };
        let n = first.image.width();
        for (i, s) in self.snippets.iter().enumerate() {
            if s.image.width() != n || s.image.height() != n {
                return Err(Error::InvalidParameter(format!(
                    "{:?} pool snippet {i} is {}x{}, expected {n}x{n}",
                    self.class,
                    s.image.width(),
                    s.image.height()
                )));
            }
            if !s.bbox.is_valid() || !s.bbox.inside(n as f64, n as f64) {
                return Err(Error::InvalidParameter(format!(
                    "{:?} pool snippet {i} has box {:?} outside the snippet",
                    self.class, s.bbox
                )));
            }
        }
        Ok(())
    }

    /// Content hash over class, snippet pixels (16-bit quantized) and boxes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.class.name().as_bytes());
        for s in &self.snippets {
            h.update((s.image.width() as u64).to_le_bytes());
            for v in s.image.quantize(BitDepth::Sixteen) {
                h.update(v.to_le_bytes());
            }
            for v in [s.bbox.x_min, s.bbox.y_min, s.bbox.x_max, s.bbox.y_max, s.native_radius] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Write snippets as 16-bit PNGs plus `manifest.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join("manifest.jsonl");
        let mut manifest = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        for (i, s) in self.snippets.iter().enumerate() {
            let file = format!("{}_{i:06}.png", self.class.name());
            s.image.save(&dir.join(&file), BitDepth::Sixteen)?;
            let line = PoolManifestLine {
                file,
                source_image: s.origin.as_ref().and_then(|o| o.image.clone()),
                source_bbox: s.origin.as_ref().map(|o| o.bbox),
                bbox: s.bbox,
                class: self.class,
                native_radius: s.native_radius,
                provenance: self.provenance,
            };
            let json = serde_json::to_string(&line).map_err(|e| Error::json(&manifest_path, e))?;
            writeln!(manifest, "{json}").map_err(|e| Error::io(&manifest_path, e))?;
        }
        Ok(())
    }

    /// Load a pool written by [`SnippetPool::save`].
    pub fn load(dir: &Path) -> Result<SnippetPool> {
        let manifest_path = dir.join("manifest.jsonl");
        let f = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut pool: Option<SnippetPool> = None;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: PoolManifestLine =
                serde_json::from_str(&line).map_err(|e| Error::json(&manifest_path, e))?;
            let pool = pool.get_or_insert_with(|| SnippetPool::new(entry.class, entry.provenance));
            if entry.class != pool.class {
                return Err(Error::InvalidParameter(format!(
                    "{}: mixed classes in one pool",
                    manifest_path.display()
                )));
            }
            let image = Raster::load(&dir.join(&entry.file))?;
            pool.snippets.push(Snippet {
                image,
                bbox: entry.bbox,
                native_radius: entry.native_radius,
                origin: entry.source_bbox.map(|bbox| SnippetOrigin {
                    image: entry.source_image.clone(),
                    bbox,
                }),
            });
        }
        let pool = pool.ok_or_else(|| {
            Error::InvalidParameter(format!("{}: empty pool manifest", manifest_path.display()))
        })?;
        pool.validate()?;
        Ok(pool)
    }

    /// Ingest a directory of PNG snippets (e.g. from an external generative
    /// model) as a pool of `class`. Files are read in name order and resampled
    /// to `size` if needed; each PI is assumed to fill its frame.
    pub fn ingest_dir(dir: &Path, class: Phase, size: usize) -> Result<SnippetPool> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        files.sort();
        let mut pool = SnippetPool::new(class, Provenance::Ingested);
        for f in files {
            let img = Raster::load(&f)?;
            let native = 0.5 * img.width().min(img.height()) as f64;
            let img = if img.width() == size && img.height() == size {
                img
            } else {
                img.resize_bilinear(size, size)
            };
            let mut s = Snippet::full_frame(img, native);
            s.origin = Some(SnippetOrigin {
                image: f.file_name().map(|n| n.to_string_lossy().into_owned()),
                bbox: BBox::new(0.0, 0.0, 2.0 * native, 2.0 * native),
            });
            pool.snippets.push(s);
        }
        Ok(pool)
    }
}

/// Zero everything outside the inscribed circle of `bbox`, then resize the
/// snippet by `factor` (bilinear). Returns the resized snippet and box.
pub fn mask_and_resize(snippet: &Raster, bbox: &BBox, factor: f64) -> Result<(Raster, BBox)> {
    let (w, h) = (snippet.width(), snippet.height());
    if !bbox.is_valid() || !bbox.inside(w as f64, h as f64) {
        return Err(Error::InvalidParameter(format!(
            "box {bbox:?} not inside {w}x{h} snippet"
        )));
    }
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidParameter(format!("resize factor {factor} must be positive")));
    }
    let out_w = (w as f64 * factor).round() as usize;
    let out_h = (h as f64 * factor).round() as usize;
    if out_w < 3 || out_h < 3 {
        return Err(Error::DegenerateResize {
            factor,
            width: out_w,
            height: out_h,
        });
    }
    let [cx, cy] = bbox.center();
    let r = 0.5 * bbox.width().min(bbox.height());
    let masked = Raster::from_fn(w, h, |x, y| {
        let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
        if d <= r {
            snippet.get(x, y)
        } else {
            0.0
        }
    });
    let resized = if out_w == w && out_h == h {
        masked
    } else {
        masked.resize_bilinear(out_w, out_h)
    };
    // scale by the realized per-axis ratio so the box tracks the pixels
    let sx = out_w as f64 / w as f64;
    let sy = out_h as f64 / h as f64;
    Ok((resized, bbox.scale(sx, sy)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapPolicy {
    Allow,
    /// Reject placements whose box has IoU above the value with any earlier one.
    Reject(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipMode {
    None,
    H,
    V,
    Hv,
}

impl FlipMode {
    /// Variants emitted per composed image; the identity always comes first.
    pub fn variants(self) -> &'static [(bool, bool)] {
        match self {
            FlipMode::None => &[(false, false)],
            FlipMode::H => &[(false, false), (true, false)],
            FlipMode::V => &[(false, false), (false, true)],
            FlipMode::Hv => &[(false, false), (true, false), (false, true), (true, true)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositionConfig {
    pub canvas: [usize; 2],
    pub images: usize,
    /// Inclusive range of PIs per class per image.
    pub per_class: [usize; 2],
    pub resize: [f64; 2],
    pub overlap: OverlapPolicy,
    pub background: f64,
    pub noise_sigma: f64,
    pub flip: FlipMode,
    pub bit_depth: BitDepth,
    pub seed: u64,
}

impl Default for CompositionConfig {
    /// 20,000 canvases with 12-13 PIs per class (25 on average, balanced),
    /// flipped both ways.
    fn default() -> Self {
        Self {
            canvas: [600, 600],
            images: 20_000,
            per_class: [12, 13],
            resize: [0.5, 2.0],
            overlap: OverlapPolicy::Allow,
            background: 0.0,
            noise_sigma: 0.0,
            flip: FlipMode::Hv,
            bit_depth: BitDepth::Eight,
            seed: 0,
        }
    }
}

impl CompositionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.resize[0] > 0.0 && self.resize[0] <= self.resize[1]) {
            return bad(format!("resize range {:?} must satisfy 0 < min <= max", self.resize));
        }
        if self.per_class[0] > self.per_class[1] {
            return bad(format!("per-class range {:?} has min > max", self.per_class));
        }
        let largest = (SNIPPET_SIZE as f64 * self.resize[1]).round() as usize;
        if self.canvas[0] <= largest || self.canvas[1] <= largest {
            return bad(format!(
                "canvas {:?} must be larger than the biggest resized snippet ({largest} px)",
                self.canvas
            ));
        }
        if !(0.0..=1.0).contains(&self.background) || !(0.0..=1.0).contains(&self.noise_sigma) {
            return bad("background and noise sigma must lie in [0, 1]".into());
        }
        if let OverlapPolicy::Reject(t) = self.overlap {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("overlap threshold {t} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Expected number of PIs per composed (unflipped) canvas.
    pub fn mean_pis_per_image(&self) -> f64 {
        2.0 * 0.5 * (self.per_class[0] + self.per_class[1]) as f64
    }
}

fn class_snippets(pools: &[SnippetPool], class: Phase) -> Vec<&Snippet> {
    pools
        .iter()
        .filter(|p| p.class == class)
        .flat_map(|p| p.snippets.iter())
        .collect()
}

/// Compose one canvas. Deterministic in `image_seed`.
pub fn compose_image(
    pools: &[SnippetPool],
    config: &CompositionConfig,
    image_seed: u64,
) -> Result<(Raster, Vec<Annotation>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
    let [cw, ch] = config.canvas;
    let mut canvas = Raster::new(cw, ch, config.background);

    let mut order = Vec::new();
    for class in Phase::ALL {
        let n = rng.random_range(config.per_class[0]..=config.per_class[1]);
        order.extend(std::iter::repeat_n(class, n));
    }
    order.shuffle(&mut rng);

    let by_class: BTreeMap<Phase, Vec<&Snippet>> = Phase::ALL
        .iter()
        .map(|&c| (c, class_snippets(pools, c)))
        .collect();
    for class in Phase::ALL {
        if order.contains(&class) && by_class[&class].is_empty() {
            return Err(Error::EmptyPool(class));
        }
    }

    let mut annotations: Vec<Annotation> = Vec::with_capacity(order.len());
    for class in order {
        let candidates = &by_class[&class];
        let index = rng.random_range(0..candidates.len());
        let snippet = candidates[index];
        let factor = if config.resize[1] > config.resize[0] {
            rng.random_range(config.resize[0]..=config.resize[1])
        } else {
            config.resize[0]
        };
        let (patch, bbox) = mask_and_resize(&snippet.image, &snippet.bbox, factor)?;

        // integer offsets keep the paste pixel-aligned
        let ox_lo = (-bbox.x_min).ceil() as i64;
        let ox_hi = (cw as f64 - bbox.x_max).floor() as i64;
        let oy_lo = (-bbox.y_min).ceil() as i64;
        let oy_hi = (ch as f64 - bbox.y_max).floor() as i64;
        if ox_hi < ox_lo || oy_hi < oy_lo {
            return Err(Error::InvalidParameter(format!(
                "resized PI box {bbox:?} does not fit canvas {cw}x{ch}"
            )));
        }
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let ox = rng.random_range(ox_lo..=ox_hi);
            let oy = rng.random_range(oy_lo..=oy_hi);
            let cand = bbox.translate(ox as f64, oy as f64);
            let ok = match config.overlap {
                OverlapPolicy::Allow => true,
                OverlapPolicy::Reject(t) => annotations.iter().all(|a| iou(&a.bbox, &cand) <= t),
            };
            if ok {
                placed = Some((ox, oy, cand));
                break;
            }
        }
        let Some((ox, oy, cand)) = placed else {
            return Err(Error::PlacementSaturation {
                attempts: MAX_PLACEMENT_ATTEMPTS,
                width: cw,
                height: ch,
                policy: format!("{:?}", config.overlap),
            });
        };
        for py in 0..patch.height() {
            let y = oy + py as i64;
            if y < 0 || y >= ch as i64 {
                continue;
            }
            for px in 0..patch.width() {
                let x = ox + px as i64;
                if x < 0 || x >= cw as i64 {
                    continue;
                }
                let (x, y) = (x as usize, y as usize);
                let v = (canvas.get(x, y) + patch.get(px, py)).min(1.0);
                canvas.set(x, y, v);
            }
        }
        annotations.push(Annotation {
            bbox: cand,
            class,
            source: Some(SnippetRef { pool: class, index }),
        });
    }
    add_noise(&mut canvas, config.noise_sigma, &mut rng);
    Ok((canvas.quantized(config.bit_depth), annotations))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub name: String,
    pub image: Raster,
    pub annotations: Vec<Annotation>,
}

impl LabeledImage {
    pub fn flipped(&self, h: bool, v: bool, name: String) -> LabeledImage {
        let (w, ht) = (self.image.width() as f64, self.image.height() as f64);
        let mut image = self.image.clone();
        if h {
            image = image.flip_h();
        }
        if v {
            image = image.flip_v();
        }
        let annotations = self
            .annotations
            .iter()
            .map(|a| {
                let mut b = a.bbox;
                if h {
                    b = b.flip_h(w);
                }
                if v {
                    b = b.flip_v(ht);
                }
                Annotation { bbox: b, ..a.clone() }
            })
            .collect();
        LabeledImage {
            name,
            image,
            annotations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config_hash: String,
    pub pools_hash: String,
    pub source_images: usize,
    pub total_images: usize,
    pub source_pis: usize,
    pub pi_instances: usize,
    pub per_class: BTreeMap<Phase, usize>,
    pub dataset_hash: String,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<LabeledImage>,
    pub bit_depth: BitDepth,
    pub manifest: DatasetManifest,
}

pub fn pools_hash(pools: &[SnippetPool]) -> String {
    let mut h = Sha256::new();
    for p in pools {
        h.update(p.content_hash().as_bytes());
    }
    hex::encode(h.finalize())
}

/// Hash of image names, quantized pixels and annotations.
pub fn dataset_hash(images: &[LabeledImage], depth: BitDepth) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update(img.name.as_bytes());
        h.update((img.image.width() as u64).to_le_bytes());
        h.update((img.image.height() as u64).to_le_bytes());
        for v in img.image.quantize(depth) {
            h.update(v.to_le_bytes());
        }
        h.update(serde_json::to_vec(&img.annotations).expect("annotations serialize"));
    }
    hex::encode(h.finalize())
}

/// Compose `config.images` canvases (in parallel, per-image seeds split from
/// `config.seed`) and append the configured flip variants.
pub fn compose_dataset(pools: &[SnippetPool], config: &CompositionConfig) -> Result<LabeledDataset> {
    config.validate()?;
    for p in pools {
        p.validate()?;
    }
    let base: Vec<LabeledImage> = (0..config.images)
        .into_par_iter()
        .map(|i| {
            let (image, annotations) = compose_image(pools, config, split_seed(config.seed, i as u64))?;
            Ok(LabeledImage {
                name: format!("img_{i:06}"),
                image,
                annotations,
            })
        })
        .collect::<Result<_>>()?;
    let source_pis = base.iter().map(|b| b.annotations.len()).sum();

    let mut images = Vec::with_capacity(base.len() * config.flip.variants().len());
    for b in &base {
        for &(h, v) in config.flip.variants() {
            let suffix = match (h, v) {
                (false, false) => "",
                (true, false) => "_h",
                (false, true) => "_v",
                (true, true) => "_hv",
            };
            if suffix.is_empty() {
                images.push(b.clone());
            } else {
                images.push(b.flipped(h, v, format!("{}{suffix}", b.name)));
            }
        }
    }
    let mut per_class = BTreeMap::new();
    for c in Phase::ALL {
        per_class.insert(c, 0usize);
    }
    for img in &images {
        for a in &img.annotations {
            *per_class.entry(a.class).or_default() += 1;
        }
    }
    let pi_instances = images.iter().map(|i| i.annotations.len()).sum();
    let manifest = DatasetManifest {
        seed: config.seed,
        config_hash: config.hash(),
        pools_hash: pools_hash(pools),
        source_images: base.len(),
        total_images: images.len(),
        source_pis,
        pi_instances,
        per_class,
        dataset_hash: dataset_hash(&images, config.bit_depth),
    };
    Ok(LabeledDataset {
        images,
        bit_depth: config.bit_depth,
        manifest,
    })
}

impl LabeledDataset {
    /// Write `images/<name>.png` and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        self.images
            .par_iter()
            .try_for_each(|img| img.image.save(&img_dir.join(format!("{}.png", img.name)), self.bit_depth))?;
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}
