use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("volume is not binary: voxel {index} has value {value}")]
    NonBinary { index: usize, value: u8 },

    #[error("spacing mismatch: volume {volume} mm vs image {image} mm")]
    SpacingMismatch { volume: f64, image: f64 },

    #[error("binary map has no foreground pixels")]
    NoForeground,

    #[error("binary map has no background pixels")]
    NoBackground,

    #[error("mean intensity is not positive ({0})")]
    DegenerateIntensity(String),

    #[error("empty DSA sequence")]
    EmptySequence,

    #[error("missing acquisition metadata: {0}; supply an explicit initial pose")]
    MissingMetadata(String),

    #[error("phantom centerline leaves the volume at {0:?}")]
    CenterlineOutOfVolume([f64; 3]),

    #[error("non-finite loss during update: {0}")]
    NonFiniteLoss(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI and the HTTP service.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::DimMismatch(_) => "DimMismatch",
            Error::NonBinary { .. } => "NonBinary",
            Error::SpacingMismatch { .. } => "SpacingMismatch",
            Error::NoForeground => "NoForeground",
            Error::NoBackground => "NoBackground",
            Error::DegenerateIntensity(_) => "DegenerateIntensity",
            Error::EmptySequence => "EmptySequence",
            Error::MissingMetadata(_) => "MissingMetadata",
            Error::CenterlineOutOfVolume(_) => "CenterlineOutOfVolume",
            Error::NonFiniteLoss(_) => "NonFiniteLoss",
            Error::Format { .. } => "Format",
            Error::NotFound(_) => "NotFound",
            Error::Io { .. } => "Io",
            Error::Codec(_) => "Codec",
        }
    }
}
