//! Label and detection file formats.
//!
//! * `yolo-txt`: one `<image>.txt` per image, lines `class cx cy w h`
//!   normalized to the canvas, class 0 = tracer, 1 = dispersed.
//! * `coco-json`: a single `annotations.json` with absolute `[x, y, w, h]`
//!   boxes, category id 1 = tracer, 2 = dispersed.
//! * detections: `detections.json`, per image a list of scored boxes.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::composer::LabeledDataset;
use crate::error::{Error, Result};
use crate::geometry::{Annotation, BBox, Phase};
use crate::hough::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelFormat {
    YoloTxt,
    CocoJson,
}

impl FromStr for LabelFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "yolo-txt" => Ok(LabelFormat::YoloTxt),
            "coco-json" => Ok(LabelFormat::CocoJson),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for LabelFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelFormat::YoloTxt => "yolo-txt",
            LabelFormat::CocoJson => "coco-json",
        })
    }
}

/// Annotations of one image together with its canvas size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLabels {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<Annotation>,
}

pub fn dataset_labels(dataset: &LabeledDataset) -> Vec<ImageLabels> {
    dataset
        .images
        .iter()
        .map(|img| ImageLabels {
            name: img.name.clone(),
            width: img.image.width(),
            height: img.image.height(),
            annotations: img.annotations.clone(),
        })
        .collect()
}

pub fn yolo_text(labels: &ImageLabels) -> String {
    let (w, h) = (labels.width as f64, labels.height as f64);
    let mut s = String::new();
    for a in &labels.annotations {
        let [cx, cy] = a.bbox.center();
        let _ = writeln!(
            s,
            "{} {:.6} {:.6} {:.6} {:.6}",
            a.class.index(),
            cx / w,
            cy / h,
            a.bbox.width() / w,
            a.bbox.height() / h
        );
    }
    s
}

pub fn parse_yolo(text: &str, width: usize, height: usize, path: &Path) -> Result<Vec<Annotation>> {
    let err = |line: usize, msg: &str| Error::LabelParse {
        path: path.to_path_buf(),
        msg: format!("line {}: {msg}", line + 1),
    };
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(err(ln, "expected 5 fields"));
        }
        let class = fields[0]
            .parse::<usize>()
            .ok()
            .and_then(Phase::from_index)
            .ok_or_else(|| err(ln, "bad class index"))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(ln, "bad number"))?;
        }
        let [cx, cy, bw, bh] = v;
        out.push(Annotation {
            bbox: BBox::new((cx - bw / 2.0) * w, (cy - bh / 2.0) * h, (cx + bw / 2.0) * w, (cy + bh / 2.0) * h),
            class,
            source: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: usize,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: usize,
    pub image_id: usize,
    pub category_id: usize,
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

pub fn to_coco(labels: &[ImageLabels]) -> CocoFile {
    let mut images = Vec::with_capacity(labels.len());
    let mut annotations = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        images.push(CocoImage {
            id: i + 1,
            file_name: format!("{}.png", l.name),
            width: l.width,
            height: l.height,
        });
        for a in &l.annotations {
            annotations.push(CocoAnnotation {
                id: annotations.len() + 1,
                image_id: i + 1,
                category_id: a.class.index() + 1,
                bbox: [a.bbox.x_min, a.bbox.y_min, a.bbox.width(), a.bbox.height()],
                area: a.bbox.area(),
                iscrowd: 0,
            });
        }
    }
    let categories = Phase::ALL
        .iter()
        .map(|p| CocoCategory {
            id: p.index() + 1,
            name: p.name().to_string(),
        })
        .collect();
    CocoFile {
        images,
        annotations,
        categories,
    }
}

pub fn from_coco(file: &CocoFile, path: &Path) -> Result<Vec<ImageLabels>> {
    let mut out: Vec<ImageLabels> = file
        .images
        .iter()
        .map(|im| ImageLabels {
            name: im.file_name.strip_suffix(".png").unwrap_or(&im.file_name).to_string(),
            width: im.width,
            height: im.height,
            annotations: Vec::new(),
        })
        .collect();
    for a in &file.annotations {
        let bad = |msg: String| Error::LabelParse {
            path: path.to_path_buf(),
            msg,
        };
        let slot = file
            .images
            .iter()
            .position(|im| im.id == a.image_id)
            .ok_or_else(|| bad(format!("annotation {} references unknown image {}", a.id, a.image_id)))?;
        let class = a
            .category_id
            .checked_sub(1)
            .and_then(Phase::from_index)
            .ok_or_else(|| bad(format!("annotation {} has unknown category {}", a.id, a.category_id)))?;
        let [x, y, w, h] = a.bbox;
        out[slot].annotations.push(Annotation {
            bbox: BBox::new(x, y, x + w, y + h),
            class,
            source: None,
        });
    }
    Ok(out)
}

/// Write labels under `dir`: `labels/<name>.txt` for yolo, `annotations.json` for coco.
pub fn write_labels(labels: &[ImageLabels], format: LabelFormat, dir: &Path) -> Result<()> {
    match format {
        LabelFormat::YoloTxt => {
            let ld = dir.join("labels");
            std::fs::create_dir_all(&ld).map_err(|e| Error::io(&ld, e))?;
            for l in labels {
                let p = ld.join(format!("{}.txt", l.name));
                std::fs::write(&p, yolo_text(l)).map_err(|e| Error::io(&p, e))?;
            }
            let p = dir.join("classes.txt");
            let names: Vec<&str> = Phase::ALL.iter().map(|p| p.name()).collect();
            std::fs::write(&p, names.join("\n") + "\n").map_err(|e| Error::io(&p, e))
        }
        LabelFormat::CocoJson => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("annotations.json");
            let json = serde_json::to_vec_pretty(&to_coco(labels)).map_err(|e| Error::json(&p, e))?;
            std::fs::write(&p, json).map_err(|e| Error::io(&p, e))
        }
    }
}

/// Read labels written by [`write_labels`]. Yolo files carry no canvas
/// size, so `images` lists `(name, width, height)` for each file to read.
pub fn read_labels(format: LabelFormat, dir: &Path, images: &[(String, usize, usize)]) -> Result<Vec<ImageLabels>> {
    match format {
        LabelFormat::YoloTxt => images
            .iter()
            .map(|(name, w, h)| {
                let p = dir.join("labels").join(format!("{name}.txt"));
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                Ok(ImageLabels {
                    name: name.clone(),
                    width: *w,
                    height: *h,
                    annotations: parse_yolo(&text, *w, *h, &p)?,
                })
            })
            .collect(),
        LabelFormat::CocoJson => {
            let p = dir.join("annotations.json");
            let text = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let file: CocoFile = serde_json::from_slice(&text).map_err(|e| Error::json(&p, e))?;
            from_coco(&file, &p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub name: String,
    pub detections: Vec<Detection>,
}

pub fn write_detections(path: &Path, dets: &[ImageDetections]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let json = serde_json::to_vec_pretty(dets).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<ImageDetections>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Path of the label artifact for `format` inside `dir`.
pub fn label_path(format: LabelFormat, dir: &Path) -> PathBuf {
    match format {
        LabelFormat::YoloTxt => dir.join("labels"),
        LabelFormat::CocoJson => dir.join("annotations.json"),
    }
}
