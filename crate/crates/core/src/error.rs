use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("inverse depth must be positive, got {0}")]
    InvalidInverseDepth(f64),

    #[error("point is not in front of the camera (depth {0})")]
    BehindCamera(f64),

    #[error("degenerate warp denominator {0:e}")]
    DegenerateWarp(f64),

    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),

    #[error("invalid projection matrix: {0}")]
    InvalidProjection(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("event stream {} is empty", .0.display())]
    EmptyStream(PathBuf),

    #[error("{}:{line}: timestamp {t} us precedes previous timestamp {prev} us", path.display())]
    OutOfOrder {
        path: PathBuf,
        line: usize,
        t: i64,
        prev: i64,
    },

    #[error("time {t} us outside trajectory range [{start}, {end}]")]
    OutOfRange { t: i64, start: i64, end: i64 },

    #[error("patch footprint leaves the image")]
    OutOfBounds,

    #[error("event at {t} us is older than the pixel's last spike at {last} us")]
    EventOrder { t: i64, last: i64 },

    #[error("render time {t} us precedes a last spike at {last} us")]
    NegativeAge { t: i64, last: i64 },

    #[error("no usable observation")]
    NoData,

    #[error("zero gradient energy; the pixel is textureless")]
    Textureless,

    #[error("distributions are not chi-square compatible")]
    Incompatible,

    #[error("no estimated pixel has ground-truth coverage")]
    NoCoverage,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
