use std::path::PathBuf;

use thiserror::Error;

use crate::alignment::AlignmentFailure;
use crate::imagecore::Rect;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to decode {format} stream: {reason}")]
    Decode {
        format: &'static str,
        reason: String,
    },

    #[error("failed to encode {format} image: {reason}")]
    Encode {
        format: &'static str,
        reason: String,
    },

    #[error("rect {rect:?} exceeds {width}x{height} image bounds")]
    OutOfBounds {
        rect: Rect,
        width: usize,
        height: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("keypoint detection failed: {0}")]
    Detection(String),

    #[error("affine estimation failed: {0}")]
    Estimation(String),

    #[error("least-squares refinement failed: {0}")]
    Refinement(String),

    #[error(transparent)]
    Alignment(#[from] Box<AlignmentFailure>),

    #[error("feature file format error: {0}")]
    FeatureFormat(String),

    #[error("degenerate similarity histogram: {0}")]
    DegenerateHistogram(String),

    #[error("loss undefined: {0}")]
    UndefinedLoss(String),

    #[error("perturbation failed: {0}")]
    Perturbation(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
