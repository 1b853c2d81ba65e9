use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] mdps_nn::NnError),
    #[error("denoiser `{0}` does not provide input gradients")]
    GradientUnavailable(String),
    #[error("non-finite values in {stage} at step {step}")]
    NonFinite { stage: String, step: usize },
    #[error("training diverged at step {step} (loss non-finite for 3 consecutive steps)")]
    Divergence { step: usize, history: Vec<f64> },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        source: ::image::ImageError,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("digest mismatch for {}: expected {expected}, found {actual}", path.display())]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("no cached weights for `{backbone}` under {} and offline mode is set", dir.display())]
    CacheMiss { backbone: String, dir: PathBuf },
    #[error("unknown backbone `{name}`; expected one of: {}", options.join(", "))]
    UnknownBackbone { name: String, options: Vec<String> },
    #[error("download failed: {0}")]
    Download(String),
    #[error("AUROC undefined: {0}")]
    UndefinedAuroc(String),
    #[error("pass {pass}: {source}")]
    Pass { pass: usize, source: Box<Error> },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::Nn(_) => "nn",
            Error::GradientUnavailable(_) => "gradient_unavailable",
            Error::NonFinite { .. } => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::CacheMiss { .. } => "cache_miss",
            Error::UnknownBackbone { .. } => "unknown_backbone",
            Error::Download(_) => "download",
            Error::UndefinedAuroc(_) => "undefined_auroc",
            Error::Pass { source, .. } => source.kind(),
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
