use std::path::PathBuf;

/// Errors raised anywhere in the dose-prediction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}` byte-length mismatch: expected {expected} bytes, found {found}")]
    ByteLengthMismatch {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("slice_z not strictly increasing")]
    SliceZNotIncreasing,

    #[error("missing PTV mask")]
    MissingPtv,

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid case: {0}")]
    InvalidCase(String),

    #[error("index {index:?} out of range for grid {dims:?}")]
    IndexOutOfRange { index: [usize; 3], dims: [usize; 3] },

    #[error("invalid phantom config: {0}")]
    InvalidPhantom(String),

    #[error("no structure masks and no intensity bands available for segmentation")]
    NoSegmentationSource,

    #[error("empty PTV")]
    EmptyPtv,

    #[error("empty structure")]
    EmptyStructure,

    #[error("invalid threshold {0}: must satisfy 0 < threshold <= 1")]
    InvalidThreshold(f64),

    #[error("empty grid")]
    EmptyGrid,

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("dimension mismatch: expected width {expected}, got {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("training diverged for every learning rate")]
    AllDiverged,

    #[error("zero prescription dose")]
    ZeroPrescription,

    #[error("k = {k} exceeds case count {cases}")]
    TooFewCases { k: usize, cases: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
