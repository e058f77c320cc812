//! Two-phase defocusing PTV toolkit.
//!
//! * [`optics`] renders defocused particle images (empty, regular fringe and
//!   speckle patterns) and full scenes with ground truth.
//! * [`hough`] is the circular-Hough extractor and non-CNN detector.
//! * [`composer`] builds auto-labeled mixed-phase datasets from single-phase
//!   snippet pools; [`labels`] reads and writes YOLO/COCO labels.
//! * [`fringe`] classifies tracers vs. dispersed phase from the 2-D spectrum.
//! * [`metrics`] is the detection/classification evaluation protocol.
//! * [`pipeline`] wires the stages behind a TOML config.

pub mod error;
pub mod geometry;
pub mod optics;
pub mod raster;
pub mod hough;
pub mod composer;
pub mod fringe;
pub mod labels;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
pub use geometry::{iou, Annotation, BBox, Phase};
pub use raster::{BitDepth, Raster};
