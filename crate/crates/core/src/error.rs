use std::path::PathBuf;

/// Errors produced by the detection pipeline and its tooling.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("insufficient points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("degenerate geometry: every plane hypothesis was collinear")]
    DegenerateGeometry,

    #[error("central reference patch too sparse: {valid_fraction:.3} valid (minimum 0.25)")]
    TooSparse { valid_fraction: f64 },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("weighted training needs at least two samples")]
    SingleSample,
    #[error("too few samples: {samples} samples for k = {k}")]
    TooFewSamples { samples: usize, k: usize },
    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),
    #[error("distance range [{lo}, {hi}) has {count} samples (need at least 2)")]
    EmptyRange { lo: f64, hi: f64, count: usize },

    #[error("region of interest has no valid depth")]
    EmptyRoi,
    #[error("patch has no foreground pixels")]
    NoForeground,
    #[error("window and template share no jointly valid pixels")]
    NoOverlap,

    #[error("frame {0} has no rgb image")]
    MissingRgb(u64),
    #[error("frame mismatch: {0}")]
    FrameMismatch(String),
    #[error("evaluation needs at least one ground-truth box")]
    NoGroundTruth,
    #[error("invalid scene description: {0}")]
    SpecError(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier printed by the command line tool.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InsufficientPoints { .. } | Error::DegenerateGeometry => "E_GEOMETRY",
            Error::TooSparse { .. }
            | Error::EmptyTrainingSet
            | Error::SingleSample
            | Error::TooFewSamples { .. }
            | Error::DegenerateClustering(_)
            | Error::EmptyRange { .. } => "E_TRAINING",
            Error::EmptyRoi | Error::NoForeground | Error::NoOverlap => "E_DETECTION",
            Error::MissingRgb(_) | Error::FrameMismatch(_) => "E_FRAMES",
            Error::NoGroundTruth => "E_NO_GT",
            Error::SpecError(_) => "E_SPEC",
            Error::InvalidInput(_) => "E_INPUT",
            Error::Config(_) => "E_CONFIG",
            Error::Format { .. } | Error::Json(_) => "E_FORMAT",
            Error::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
