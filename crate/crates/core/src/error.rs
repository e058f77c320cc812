use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("output size {out_size} px is smaller than particle image diameter {diameter} px")]
    SnippetTooSmall { out_size: usize, diameter: f64 },

    #[error("degenerate particle image spec: {0}")]
    DegenerateSpec(String),

    #[error("fringe count is only defined for regular patterns, got {0:?}")]
    NotRegular(crate::optics::Pattern),

    #[error("resize by factor {factor} yields {width}x{height} px, below the 3 px minimum")]
    DegenerateResize {
        factor: f64,
        width: usize,
        height: usize,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("calibration requires at least {min} snippets per class, got {tracers} tracers and {dispersed} dispersed")]
    Calibration {
        min: usize,
        tracers: usize,
        dispersed: usize,
    },

    #[error(
        "could not place particle image after {attempts} attempts \
         (canvas {width}x{height}, overlap policy {policy}); reduce counts or resize range"
    )]
    PlacementSaturation {
        attempts: usize,
        width: usize,
        height: usize,
        policy: String,
    },

    #[error("empty snippet pool for {0:?}")]
    EmptyPool(crate::geometry::Phase),

    #[error("no defined precision/recall points on curve")]
    EmptyCurve,

    #[error("unknown label format {0:?} (expected yolo-txt or coco-json)")]
    UnknownFormat(String),

    #[error("malformed label file {path}: {msg}")]
    LabelParse { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} needs {path}, which does not exist; run the upstream stage first")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
