use std::path::PathBuf;

use thiserror::Error;

use crate::scene::ObjectLabel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} rad is too close to pi for a well-conditioned logarithm")]
    AngleNearPi { angle: f64 },

    #[error("point depth {z} mm is not in front of the camera (z_min = {z_min} mm)")]
    BehindCamera { z: f64, z_min: f64 },

    #[error("invalid depth value {0}")]
    InvalidDepth(f64),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("failed to parse manifest {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("missing asset {0}")]
    MissingAsset(PathBuf),

    #[error("dimension mismatch in {what}: expected {expected_width}x{expected_height}, found {width}x{height}")]
    DimensionMismatch {
        what: String,
        expected_width: usize,
        expected_height: usize,
        width: usize,
        height: usize,
    },

    #[error("malformed asset {path}: {reason}")]
    MalformedAsset { path: PathBuf, reason: String },

    #[error("object {0} has too few usable pixels")]
    EmptyObject(ObjectLabel),

    #[error("normal equations are numerically singular (condition estimate {condition:e})")]
    SingularNormalEquations { condition: f64 },

    #[error("need at least 3 point pairs, got {0}")]
    TooFewPoints(usize),

    #[error("point configuration is degenerate (collinear or coincident)")]
    DegenerateConfiguration,

    #[error("frame {index} has no ground-truth pose for {label}")]
    MissingPose { index: usize, label: ObjectLabel },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
