use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed safetensors header: {0}")]
    MalformedHeader(String),

    #[error("truncated buffer: tensor `{name}` needs bytes {begin}..{end} but only {available} are present")]
    Truncated {
        name: String,
        begin: usize,
        end: usize,
        available: usize,
    },

    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("layer `{key}` has a {present} factor but no matching {missing} factor")]
    MissingPartner {
        key: String,
        present: &'static str,
        missing: &'static str,
    },

    #[error("no LoRA layers found")]
    NoLoraLayers,

    #[error("adapters share no layers")]
    NoSharedLayers,

    #[error("layer `{key}`: update shape mismatch, content {content:?} vs style {style:?}")]
    ShapeMismatch {
        key: String,
        content: (usize, usize),
        style: (usize, usize),
    },

    #[error("invalid shape for `{name}`: {reason}")]
    InvalidShape { name: String, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero vector cannot be normalized")]
    ZeroVector,

    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),

    #[error("step index {index} out of range for {steps} steps")]
    StepOutOfRange { index: usize, steps: usize },

    #[error("no energy entry for layer `{0}`")]
    MissingEnergy(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("output directory {} exists and is not empty", .0.display())]
    OutputExists(PathBuf),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the filesystem rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::OutputExists(_))
    }
}
