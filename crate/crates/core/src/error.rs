use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("map is constant; no threshold separates it")]
    ConstantMap,
    #[error("blur sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("invalid box [{x0}, {y0}, {x1}, {y1}] for a {width}x{height} grid")]
    InvalidBox {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        width: usize,
        height: usize,
    },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("classifier expects {expected} channels, image has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("k = {k} out of range for {num_classes} classes")]
    KOutOfRange { k: usize, num_classes: usize },
    #[error("proposal pool is empty")]
    EmptyPool,
    #[error("boxes cover the whole domain; no background pixels available")]
    NoBackground,
    #[error("foreground and background pixel sets overlap at ({x}, {y})")]
    Overlap { x: usize, y: usize },
    #[error("pixel ({x}, {y}) out of bounds for a {width}x{height} grid")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("pseudo-label mask has no labeled pixel")]
    AllUnknown,
    #[error("ground truth for image {0} has no mask")]
    MissingMask(String),
    #[error("ground truth for image {0} has no box")]
    MissingGtBox(String),
    #[error("prediction list for image {image} has {len} entries, need {k}")]
    ShortPredictionList { image: String, len: usize, k: usize },
    #[error("no cached scores for image {image_id} box {bbox:?}")]
    ScoreMissing { image_id: String, bbox: [usize; 4] },
    #[error("invalid scores: {0}")]
    InvalidScores(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("malformed {}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    MissingInput,
    Computation,
}

impl ErrorCategory {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::MissingInput => 3,
            ErrorCategory::Computation => 4,
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfig(_) => ErrorCategory::Config,
            Error::MissingInput(_) => ErrorCategory::MissingInput,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorCategory::MissingInput
            }
            _ => ErrorCategory::Computation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}
