//! Boxes, phase labels and annotations shared by every stage.
//!
//! Coordinates are continuous pixel units: pixel `(i, j)` covers
//! `[i, i + 1) x [j, j + 1)` and its center sits at `(i + 0.5, j + 0.5)`.

use serde::{Deserialize, Serialize};

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Tight square of side `2 * radius` around `center`.
    pub fn around(center: [f64; 2], radius: f64) -> Self {
        Self::new(
            center[0] - radius,
            center[1] - radius,
            center[0] + radius,
            center[1] + radius,
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && [self.x_min, self.y_min, self.x_max, self.y_max]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clip to `[0, width] x [0, height]`. Returns `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width),
            self.y_max.min(height),
        );
        b.is_valid().then_some(b)
    }

    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox::new(
            self.x_min * sx,
            self.y_min * sy,
            self.x_max * sx,
            self.y_max * sy,
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    /// Mirror horizontally inside a canvas of the given width.
    pub fn flip_h(&self, width: f64) -> BBox {
        BBox::new(width - self.x_max, self.y_min, width - self.x_min, self.y_max)
    }

    /// Mirror vertically inside a canvas of the given height.
    pub fn flip_v(&self, height: f64) -> BBox {
        BBox::new(self.x_min, height - self.y_max, self.x_max, height - self.y_min)
    }
}

/// Intersection over union of two boxes; 0 when either is degenerate.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// The two classification targets. Tracers cover empty and speckle
/// patterns, the dispersed phase (bubbles, droplets) shows regular fringes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Tracer,
    Dispersed,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Tracer, Phase::Dispersed];

    /// Index used in label files: tracer 0, dispersed 1.
    pub fn index(self) -> usize {
        match self {
            Phase::Tracer => 0,
            Phase::Dispersed => 1,
        }
    }

    pub fn from_index(idx: usize) -> Option<Phase> {
        match idx {
            0 => Some(Phase::Tracer),
            1 => Some(Phase::Dispersed),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Tracer => "tracer",
            Phase::Dispersed => "dispersed",
        }
    }
}

/// Reference to the pool snippet an annotation was pasted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetRef {
    pub pool: Phase,
    pub index: usize,
}

/// Ground-truth label for one particle image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SnippetRef>,
}

/// Derive an independent 64-bit seed for item `index` of a stream seeded
/// with `seed` (SplitMix64 finalizer over the pair).
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
