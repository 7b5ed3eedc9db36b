use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty domain `{0}`: no decodable images found")]
    EmptyDomain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("requested {requested} shape classes but only {available} are available")]
    TooManyClasses { requested: usize, available: usize },

    #[error("gaussian kernel size must be odd, got {0}")]
    EvenKernel(usize),

    #[error("input {height}x{width} is not divisible by {multiple}; pad to {padded_height}x{padded_width}")]
    SpatialSize {
        height: usize,
        width: usize,
        multiple: usize,
        padded_height: usize,
        padded_width: usize,
    },

    #[error("expected {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },

    #[error("queue for domain {queue} cannot store an embedding from domain {got}")]
    QueueIsolation { queue: usize, got: usize },

    #[error("embedding is not unit norm (norm {norm})")]
    NotUnitNorm { norm: f64 },

    #[error("domain index {domain} out of range for {n_domains} domains")]
    DomainOutOfRange { domain: usize, n_domains: usize },

    #[error("mapper for domain {mapper} received an image of domain {image}")]
    MapperDomain { mapper: usize, image: usize },

    #[error("bridge loss variant `{0}` needs an edge oracle that was not provided")]
    MissingOracle(String),

    #[error("parameter group {0} is registered with both optimizers")]
    OptimizerOverlap(String),

    #[error("non-finite loss component `{0}`")]
    NonFinite(&'static str),

    #[error("feature provenance violation: {0}")]
    Provenance(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("class `{0}` has no labeled source images")]
    ClassWithoutImages(String),

    #[error("class `{class}` has {have} source images, {need} shots requested")]
    InsufficientShots { class: String, have: usize, need: usize },

    #[error("training set has a single class; a probe needs at least two")]
    SingleClass,

    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
