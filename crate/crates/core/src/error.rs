use std::path::PathBuf;

use crate::bim::RigidTransform;

/// Where in an input file a parse failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Byte(u64),
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Location::Line(l) => write!(f, "line {l}"),
            Location::Byte(b) => write!(f, "byte {b}"),
        }
    }
}

/// Per-stage candidate counts reported when coarse alignment finds nothing.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct CoarseStageCounts {
    pub lidar_keypoints: usize,
    pub bim_points: usize,
    pub bim_pairs: usize,
    pub bim_bases: usize,
    pub matched_candidates: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {location}: {message}")]
    Parse { location: Location, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate neighborhood: {0} points, need at least 3")]
    DegenerateNeighborhood(usize),

    #[error("degenerate line fit: all points coincide")]
    DegenerateLine,

    #[error("degenerate plane: reference points are collinear")]
    DegeneratePlane,

    #[error("label file has {found} rows, cloud has {expected} points")]
    LabelCountMismatch { expected: usize, found: usize },

    #[error("unknown class id {id} at line {line}")]
    UnknownClassId { line: usize, id: i64 },

    #[error("no labeled points to propagate from")]
    NoLabeledPoints,

    #[error("empty confusion matrix")]
    EmptyMatrix,

    #[error("transform invariant violated: {0}")]
    InvalidTransform(String),

    #[error("coarse alignment failed: {0:?}")]
    CoarseAlignmentFailed(CoarseStageCounts),

    #[error("registration diverged after {iterations} iterations: no correspondences")]
    RegistrationDiverged {
        iterations: usize,
        last: Box<RigidTransform>,
    },

    #[error("underconstrained refinement: {0} valid residuals, need at least 6")]
    Underconstrained(usize),

    #[error("no BIM corner has a valid LiDAR plane within range")]
    NoOverlap,

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse_line(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            location: Location::Line(line),
            message: message.into(),
        }
    }

    pub(crate) fn parse_byte(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            location: Location::Byte(offset),
            message: message.into(),
        }
    }
}
