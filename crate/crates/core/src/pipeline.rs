//! Staged pipeline driven by a TOML config.
//!
//! `simulate` renders single-phase acquisitions and a two-phase test set,
//! `extract` cuts snippet pools out of the acquisitions with the Hough
//! detector, `compose` builds the auto-labeled dataset, `classify`
//! calibrates the fringe classifier on it and labels Hough detections on the
//! test set, and `evaluate` scores detections against the test ground truth.
//!
//! Each stage writes to `<out>/<stage>-<key>/`, where the key hashes the
//! stage config, the seed and the keys of its inputs. Stages are written to
//! a temporary directory first and renamed into place on success.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composer::{compose_dataset, CompositionConfig, Provenance, SnippetPool, SNIPPET_SIZE};
use crate::error::{Error, Result};
use crate::fringe::{balanced_accuracy, calibrate_thresholds, classify_snippet, compute_features, ClassifierThresholds};
use crate::geometry::{split_seed, Phase};
use crate::hough::{detect_circles, extract_snippets, filter_overlaps, DetClass, Detection, HoughParams, OverlapMode};
use crate::labels::{
    dataset_labels, read_detections, read_labels, write_detections, write_labels, ImageDetections, ImageLabels,
    LabelFormat,
};
use crate::metrics::{evaluate, write_report, ImageEval};
use crate::optics::{random_scene, render_scene, PatternSampler, SensorModel};
use crate::raster::Raster;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Simulate,
    Extract,
    Compose,
    Classify,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Simulate,
        Stage::Extract,
        Stage::Compose,
        Stage::Classify,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Extract => "extract",
            Stage::Compose => "compose",
            Stage::Classify => "classify",
            Stage::Evaluate => "evaluate",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Parse a comma-separated stage list; the result is in pipeline order.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    let mut stages = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Stage::from_str)
        .collect::<Result<Vec<_>>>()?;
    stages.sort();
    stages.dedup();
    Ok(stages)
}

fn default_sensor() -> SensorModel {
    let mut s = SensorModel::new(600, 600);
    s.noise_sigma = 0.01;
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub sensor: SensorModel,
    pub sampler: PatternSampler,
    /// Single-phase acquisition images per phase.
    pub acquisition_images: usize,
    /// PIs per acquisition image, inclusive range.
    pub acquisition_pis: [usize; 2],
    pub test_images: usize,
    /// PIs per class per test image, inclusive range.
    pub test_per_class: [usize; 2],
    pub non_overlapping: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            sensor: default_sensor(),
            sampler: PatternSampler::default(),
            acquisition_images: 10,
            acquisition_pis: [6, 10],
            test_images: 20,
            test_per_class: [2, 5],
            non_overlapping: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub tracer: Option<PathBuf>,
    pub dispersed: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub hough: HoughParams,
    /// Detections overlapping another one above this IoU are both dropped.
    pub overlap_iou: f64,
    pub ingest: Option<IngestConfig>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            hough: HoughParams::default(),
            overlap_iou: 0.0,
            ingest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComposeConfig {
    /// Dataset parameters; `seed` is replaced by one derived from the global seed.
    pub dataset: CompositionConfig,
    /// Label formats to export (coco-json is always written).
    pub formats: Vec<LabelFormat>,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            dataset: CompositionConfig {
                images: 200,
                ..Default::default()
            },
            formats: vec![LabelFormat::YoloTxt, LabelFormat::CocoJson],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyConfig {
    pub hough: HoughParams,
    /// Cap on calibration crops per class taken from the composed dataset.
    pub calibration_per_class: usize,
    /// Fixed thresholds; skips calibration when set.
    pub thresholds: Option<ClassifierThresholds>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            hough: HoughParams::default(),
            calibration_per_class: 1000,
            thresholds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectionSource {
    GroundTruth,
    Classified,
    File(PathBuf),
}

impl DetectionSource {
    fn parse(s: &str) -> Self {
        match s {
            "ground-truth" => DetectionSource::GroundTruth,
            "classified" => DetectionSource::Classified,
            path => DetectionSource::File(PathBuf::from(path)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub iou: f64,
    /// `classified`, `ground-truth`, or a path to a detections JSON file.
    pub detections: String,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            iou: crate::metrics::DEFAULT_IOU,
            detections: "classified".into(),
        }
    }
}

impl EvaluateConfig {
    pub fn source(&self) -> DetectionSource {
        DetectionSource::parse(&self.detections)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub simulate: Option<SimulateConfig>,
    pub extract: Option<ExtractConfig>,
    pub compose: Option<ComposeConfig>,
    pub classify: Option<ClassifyConfig>,
    pub evaluate: Option<EvaluateConfig>,
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn configured(&self) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|&s| self.has(s)).collect()
    }

    fn has(&self, stage: Stage) -> bool {
        match stage {
            Stage::Simulate => self.simulate.is_some(),
            Stage::Extract => self.extract.is_some(),
            Stage::Compose => self.compose.is_some(),
            Stage::Classify => self.classify.is_some(),
            Stage::Evaluate => self.evaluate.is_some(),
        }
    }

    /// Checks everything that can be checked before touching the disk.
    pub fn validate(&self, stages: &[Stage]) -> Result<()> {
        for &s in stages {
            if !self.has(s) {
                return Err(Error::Config(format!("stage {s} requested but [{s}] section is missing")));
            }
        }
        let needs_seed = Stage::ALL.iter().any(|&s| self.has(s) && s <= Stage::Compose);
        if needs_seed && self.seed.is_none() {
            return Err(Error::Config("`seed` is required when simulate, extract or compose is configured".into()));
        }
        if let Some(c) = &self.simulate {
            c.sensor.validate().map_err(config_err)?;
            c.sampler.validate().map_err(config_err)?;
            for (name, r) in [("acquisition_pis", c.acquisition_pis), ("test_per_class", c.test_per_class)] {
                if r[0] > r[1] {
                    return Err(Error::Config(format!("simulate.{name} {r:?} has min > max")));
                }
            }
        }
        if let Some(c) = &self.extract {
            c.hough.validate().map_err(config_err)?;
            if !(0.0..=1.0).contains(&c.overlap_iou) {
                return Err(Error::Config(format!("extract.overlap_iou {} outside [0, 1]", c.overlap_iou)));
            }
            if let Some(ing) = &c.ingest {
                for p in ing.tracer.iter().chain(&ing.dispersed) {
                    if !p.is_dir() {
                        return Err(Error::Config(format!("extract.ingest directory {} not found", p.display())));
                    }
                }
            }
        }
        if let Some(c) = &self.compose {
            c.dataset.validate().map_err(config_err)?;
        }
        if let Some(c) = &self.classify {
            c.hough.validate().map_err(config_err)?;
            if let Some(t) = &c.thresholds {
                t.validate().map_err(config_err)?;
            }
        }
        if let Some(c) = &self.evaluate {
            if !(c.iou > 0.0 && c.iou <= 1.0) {
                return Err(Error::Config(format!("evaluate.iou {} outside (0, 1]", c.iou)));
            }
            if let DetectionSource::File(p) = c.source() {
                if !p.is_file() {
                    return Err(Error::Config(format!("evaluate.detections file {} not found", p.display())));
                }
            }
            if stages.contains(&Stage::Evaluate) && c.source() == DetectionSource::Classified && !self.has(Stage::Classify) {
                return Err(Error::Config("evaluate.detections = \"classified\" needs a [classify] section".into()));
            }
        }
        Ok(())
    }

    fn seed_for(&self, stage: Stage) -> u64 {
        split_seed(self.seed.unwrap_or(0), stage.index())
    }

    fn inputs(&self, stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Simulate => vec![],
            Stage::Extract => vec![Stage::Simulate],
            Stage::Compose => vec![Stage::Extract],
            Stage::Classify => vec![Stage::Simulate, Stage::Compose],
            Stage::Evaluate => match self.evaluate.as_ref().map(EvaluateConfig::source) {
                Some(DetectionSource::Classified) => vec![Stage::Simulate, Stage::Classify],
                _ => vec![Stage::Simulate],
            },
        }
    }

    fn section_json(&self, stage: Stage) -> Result<serde_json::Value> {
        let v = match stage {
            Stage::Simulate => serde_json::to_value(&self.simulate),
            Stage::Extract => serde_json::to_value(&self.extract),
            Stage::Compose => serde_json::to_value(&self.compose),
            Stage::Classify => serde_json::to_value(&self.classify),
            Stage::Evaluate => serde_json::to_value(&self.evaluate),
        };
        v.map_err(|e| Error::Config(e.to_string()))
    }

    /// Content key of a stage's output: its config, seed, inputs' keys and,
    /// for file inputs, the file contents.
    pub fn stage_key(&self, stage: Stage) -> Result<String> {
        let mut h = Sha256::new();
        h.update(stage.name());
        h.update(self.section_json(stage)?.to_string());
        if stage <= Stage::Compose {
            h.update(self.seed_for(stage).to_le_bytes());
        }
        for dep in self.inputs(stage) {
            h.update(self.stage_key(dep)?);
        }
        if let (Stage::Evaluate, Some(DetectionSource::File(p))) =
            (stage, self.evaluate.as_ref().map(EvaluateConfig::source))
        {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            h.update(Sha256::digest(bytes));
        }
        Ok(hex::encode(h.finalize())[..16].to_string())
    }

    pub fn stage_dir(&self, out: &Path, stage: Stage) -> Result<PathBuf> {
        Ok(out.join(format!("{}-{}", stage.name(), self.stage_key(stage)?)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: Stage,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub stage: Stage,
    pub dir: PathBuf,
}

/// Run `stages` (in pipeline order) under `out`. Upstream artifacts not
/// produced in this run are looked up by their content key.
pub fn run(config: &PipelineConfig, stages: &[Stage], out: &Path) -> Result<Vec<StageOutput>> {
    config.validate(stages)?;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut done = Vec::new();
    for stage in stages {
        let dir = config.stage_dir(out, stage)?;
        let tmp = out.join(format!(".{}.tmp-{}", dir.file_name().unwrap().to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        log::info!("stage {stage}: writing {}", dir.display());
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let clock = Instant::now();
        let result = run_stage(config, stage, out, &tmp).and_then(|()| {
            let manifest = RunManifest {
                stage,
                config_hash: config.stage_key(stage)?,
                seed: config.seed,
                version: VERSION.to_string(),
                started_unix_ms: started,
                elapsed_ms: clock.elapsed().as_millis(),
            };
            write_json(&tmp.join("run.json"), &manifest)?;
            write_json(&tmp.join("config.json"), &config.section_json(stage)?)
        });
        if let Err(e) = result {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        log::info!("stage {stage}: done in {} ms", clock.elapsed().as_millis());
        done.push(StageOutput { stage, dir });
    }
    Ok(done)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Upstream stage directory, which must already exist.
fn input_dir(config: &PipelineConfig, out: &Path, stage: Stage, input: Stage) -> Result<PathBuf> {
    let dir = config.stage_dir(out, input)?;
    if !dir.is_dir() {
        return Err(Error::MissingArtifact {
            stage: stage.name().into(),
            path: dir,
        });
    }
    Ok(dir)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn run_stage(config: &PipelineConfig, stage: Stage, out: &Path, dir: &Path) -> Result<()> {
    let seed = config.seed_for(stage);
    match stage {
        Stage::Simulate => simulate(config.simulate.as_ref().expect("validated"), seed, dir),
        Stage::Extract => {
            let sim = input_dir(config, out, stage, Stage::Simulate)?;
            extract(config.extract.as_ref().expect("validated"), &sim, dir)
        }
        Stage::Compose => {
            let ext = input_dir(config, out, stage, Stage::Extract)?;
            compose(config.compose.as_ref().expect("validated"), seed, &ext, dir)
        }
        Stage::Classify => {
            let sim = input_dir(config, out, stage, Stage::Simulate)?;
            let comp = input_dir(config, out, stage, Stage::Compose)?;
            classify(config.classify.as_ref().expect("validated"), &sim, &comp, dir)
        }
        Stage::Evaluate => {
            let c = config.evaluate.as_ref().expect("validated");
            let sim = input_dir(config, out, stage, Stage::Simulate)?;
            let dets = match c.source() {
                DetectionSource::Classified => {
                    Some(input_dir(config, out, stage, Stage::Classify)?.join("detections.json"))
                }
                DetectionSource::File(p) => Some(p),
                DetectionSource::GroundTruth => None,
            };
            evaluate_stage(c, &sim, dets.as_deref(), dir)
        }
    }
}

fn simulate(c: &SimulateConfig, seed: u64, dir: &Path) -> Result<()> {
    let draw = |rng: &mut ChaCha8Rng, r: [usize; 2]| rng.random_range(r[0]..=r[1]);
    for phase in Phase::ALL {
        let sub = dir.join("acquisition").join(phase.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        (0..c.acquisition_images).into_par_iter().try_for_each(|i| {
            let s = split_seed(split_seed(seed, phase.index() as u64), i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let n = draw(&mut rng, c.acquisition_pis);
            let (t, d) = match phase {
                Phase::Tracer => (n, 0),
                Phase::Dispersed => (0, n),
            };
            let scene = random_scene(&c.sensor, &c.sampler, t, d, true, rng.random())?;
            let r = render_scene(&scene)?;
            r.image.save(&sub.join(format!("img_{i:06}.png")), r.bit_depth)
        })?;
    }

    let test = dir.join("test");
    let img_dir = test.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let labels: Vec<ImageLabels> = (0..c.test_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(split_seed(seed, 2), i as u64));
            let t = draw(&mut rng, c.test_per_class);
            let d = draw(&mut rng, c.test_per_class);
            let scene = random_scene(&c.sensor, &c.sampler, t, d, c.non_overlapping, rng.random())?;
            let r = render_scene(&scene)?;
            let name = format!("img_{i:06}");
            r.image.save(&img_dir.join(format!("{name}.png")), r.bit_depth)?;
            Ok(ImageLabels {
                name,
                width: r.image.width(),
                height: r.image.height(),
                annotations: r.annotations,
            })
        })
        .collect::<Result<_>>()?;
    write_labels(&labels, LabelFormat::CocoJson, &test)
}

#[derive(Debug, Serialize, Deserialize)]
struct ExtractSummary {
    class: Phase,
    images: usize,
    detections: usize,
    snippets: usize,
}

fn extract(c: &ExtractConfig, sim: &Path, dir: &Path) -> Result<()> {
    let mut summary = Vec::new();
    for phase in Phase::ALL {
        let files = list_pngs(&sim.join("acquisition").join(phase.name()))?;
        let per_image: Vec<(usize, Vec<_>)> = files
            .par_iter()
            .map(|f| {
                let img = Raster::load(f)?;
                let dets = detect_circles(&img, &c.hough)?;
                let kept = filter_overlaps(&dets, c.overlap_iou, OverlapMode::DropBoth);
                let name = format!("{}/{}", phase.name(), stem(f));
                Ok((dets.len(), extract_snippets(&img, &kept, SNIPPET_SIZE, Some(&name))))
            })
            .collect::<Result<_>>()?;
        let mut pool = SnippetPool::new(phase, Provenance::Extracted);
        let mut detections = 0;
        for (n, snippets) in per_image {
            detections += n;
            pool.snippets.extend(snippets);
        }
        summary.push(ExtractSummary {
            class: phase,
            images: files.len(),
            detections,
            snippets: pool.len(),
        });
        log::info!("extract: {} {} snippets from {} images", pool.len(), phase.name(), files.len());
        if !pool.is_empty() {
            pool.save(&dir.join("pools").join(phase.name()))?;
        }
    }
    if let Some(ing) = &c.ingest {
        for (phase, path) in [(Phase::Tracer, &ing.tracer), (Phase::Dispersed, &ing.dispersed)] {
            if let Some(p) = path {
                let pool = SnippetPool::ingest_dir(p, phase, SNIPPET_SIZE)?;
                if !pool.is_empty() {
                    pool.save(&dir.join("pools").join(format!("{}-ingested", phase.name())))?;
                }
            }
        }
    }
    write_json(&dir.join("extract.json"), &summary)
}

fn load_pools(ext: &Path) -> Result<Vec<SnippetPool>> {
    let root = ext.join("pools");
    if !root.is_dir() {
        return Err(Error::MissingArtifact {
            stage: Stage::Compose.name().into(),
            path: root,
        });
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| SnippetPool::load(d)).collect()
}

fn compose(c: &ComposeConfig, seed: u64, ext: &Path, dir: &Path) -> Result<()> {
    let pools = load_pools(ext)?;
    let cfg = CompositionConfig {
        seed,
        ..c.dataset.clone()
    };
    let dataset = compose_dataset(&pools, &cfg)?;
    let out = dir.join("dataset");
    dataset.write(&out)?;
    let labels = dataset_labels(&dataset);
    let mut formats = c.formats.clone();
    if !formats.contains(&LabelFormat::CocoJson) {
        formats.push(LabelFormat::CocoJson);
    }
    for f in formats {
        write_labels(&labels, f, &out)?;
    }
    log::info!(
        "compose: {} images, {} PI instances, dataset {}",
        dataset.manifest.total_images,
        dataset.manifest.pi_instances,
        &dataset.manifest.dataset_hash[..12]
    );
    Ok(())
}

fn is_flip_variant(name: &str) -> bool {
    name.ends_with("_h") || name.ends_with("_v") || name.ends_with("_hv")
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationSummary {
    tracers: usize,
    dispersed: usize,
    balanced_accuracy: f64,
    thresholds: ClassifierThresholds,
    calibrated: bool,
}

/// Label every detection by classifying its crop.
pub fn classify_detections(image: &Raster, dets: &mut [Detection], thresholds: &ClassifierThresholds) -> Result<()> {
    for d in dets {
        let crop = image.crop_resample(&d.bbox, SNIPPET_SIZE, SNIPPET_SIZE);
        d.class = match classify_snippet(&crop, thresholds) {
            Ok(c) => c.class.into(),
            Err(Error::DegenerateInput(_)) => DetClass::Unknown,
            Err(e) => return Err(e),
        };
    }
    Ok(())
}

fn classify(c: &ClassifyConfig, sim: &Path, comp: &Path, dir: &Path) -> Result<()> {
    let ds = comp.join("dataset");
    let labels = read_labels(LabelFormat::CocoJson, &ds, &[])?;
    let mut samples = Vec::new();
    let mut counts = [0usize; 2];
    for l in labels.iter().filter(|l| !is_flip_variant(&l.name)) {
        if counts.iter().all(|&n| n >= c.calibration_per_class) {
            break;
        }
        let img = Raster::load(&ds.join("images").join(format!("{}.png", l.name)))?;
        for a in &l.annotations {
            let k = a.class.index();
            if counts[k] >= c.calibration_per_class {
                continue;
            }
            let crop = img.crop_resample(&a.bbox, SNIPPET_SIZE, SNIPPET_SIZE);
            if let Ok(f) = compute_features(&crop) {
                samples.push((f, a.class));
                counts[k] += 1;
            }
        }
    }
    let (thresholds, calibrated) = match &c.thresholds {
        Some(t) => (*t, false),
        None => (calibrate_thresholds(&samples)?, true),
    };
    thresholds.save(&dir.join("thresholds.json"))?;
    let summary = CalibrationSummary {
        tracers: counts[0],
        dispersed: counts[1],
        balanced_accuracy: if samples.is_empty() { 0.0 } else { balanced_accuracy(&samples, &thresholds) },
        thresholds,
        calibrated,
    };
    log::info!(
        "classify: thresholds {:?}, training balanced accuracy {:.4}",
        thresholds,
        summary.balanced_accuracy
    );
    write_json(&dir.join("calibration.json"), &summary)?;

    let files = list_pngs(&sim.join("test").join("images"))?;
    let dets: Vec<ImageDetections> = files
        .par_iter()
        .map(|f| {
            let img = Raster::load(f)?;
            let mut detections = detect_circles(&img, &c.hough)?;
            classify_detections(&img, &mut detections, &thresholds)?;
            Ok(ImageDetections {
                name: stem(f),
                detections,
            })
        })
        .collect::<Result<_>>()?;
    write_detections(&dir.join("detections.json"), &dets)
}

fn evaluate_stage(c: &EvaluateConfig, sim: &Path, dets: Option<&Path>, dir: &Path) -> Result<()> {
    let truth = read_labels(LabelFormat::CocoJson, &sim.join("test"), &[])?;
    let dets = match dets {
        Some(p) => read_detections(p)?,
        None => truth
            .iter()
            .map(|l| ImageDetections {
                name: l.name.clone(),
                detections: l
                    .annotations
                    .iter()
                    .map(|a| Detection {
                        bbox: a.bbox,
                        class: a.class.into(),
                        confidence: 1.0,
                    })
                    .collect(),
            })
            .collect(),
    };
    let images: Vec<ImageEval> = truth
        .into_iter()
        .map(|l| ImageEval {
            detections: dets
                .iter()
                .find(|d| d.name == l.name)
                .map(|d| d.detections.clone())
                .unwrap_or_default(),
            ground_truth: l.annotations,
        })
        .collect();
    let (report, curve) = evaluate(&images, c.iou)?;
    log::info!(
        "evaluate: AP {:.4}, norm TAP {:.4}, CA {:?}, bias {:?}",
        report.ap,
        report.norm_tap,
        report.class_accuracy,
        report.fp_class_bias
    );
    write_report(dir, &report, &curve)
}

/// SHA-256 of a file, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Read a stage's run manifest.
pub fn read_run_manifest(dir: &Path) -> Result<RunManifest> {
    read_json(&dir.join("run.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_list_parsing() {
        assert_eq!(
            parse_stages("evaluate, simulate").unwrap(),
            vec![Stage::Simulate, Stage::Evaluate]
        );
        assert!(matches!(parse_stages("simulate,train"), Err(Error::Config(_))));
    }

    #[test]
    fn config_errors() {
        let bad = PipelineConfig::parse("seed = 1\n[simulate]\nacquisition_imagez = 3\n").unwrap_err();
        assert!(bad.to_string().contains("acquisition_imagez"));
        let no_seed = PipelineConfig::parse("[simulate]\n").unwrap();
        assert!(no_seed.validate(&[Stage::Simulate]).is_err());
        let missing = PipelineConfig::parse("seed = 1\n[simulate]\n").unwrap();
        assert!(missing.validate(&[Stage::Simulate, Stage::Extract]).is_err());
    }

    #[test]
    fn keys_follow_inputs() {
        let a = PipelineConfig::parse("seed = 1\n[simulate]\n[extract]\n").unwrap();
        let mut b = a.clone();
        b.simulate.as_mut().unwrap().test_images = 3;
        assert_ne!(a.stage_key(Stage::Simulate).unwrap(), b.stage_key(Stage::Simulate).unwrap());
        assert_ne!(a.stage_key(Stage::Extract).unwrap(), b.stage_key(Stage::Extract).unwrap());
        assert_eq!(a.stage_key(Stage::Extract).unwrap(), a.clone().stage_key(Stage::Extract).unwrap());
    }
}
