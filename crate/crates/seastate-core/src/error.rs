use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error category, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad invocation (unknown command, malformed flags). Exit 1.
    Usage,
    /// Invalid or inconsistent configuration. Exit 2.
    Config,
    /// Dataset, geometry or label problems. Exit 3.
    Data,
    /// Missing or corrupt pretrained assets / model bundles. Exit 4.
    Asset,
    /// Runtime failures: divergence, profiling, IO. Exit 5.
    Runtime,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 1,
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Asset => 4,
            ErrorCategory::Runtime => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("label {label} outside declared range {min}..={max}")]
    LabelOutOfRange { label: i64, min: u8, max: u8 },

    #[error("insufficient frames for class {label}: need {needed}, have {available}")]
    InsufficientFrames {
        label: u8,
        needed: usize,
        available: usize,
    },

    #[error("dataset build aborted, per-class shortfalls:\n{report}")]
    Shortfall { report: String },

    #[error("data: {0}")]
    Data(String),

    #[error("asset: {0}")]
    Asset(String),

    #[error(
        "label mapping required: model labels {model_min}..={model_max}, \
         dataset labels {dataset_min}..={dataset_max}"
    )]
    MappingRequired {
        model_min: u8,
        model_max: u8,
        dataset_min: u8,
        dataset_max: u8,
    },

    #[error("profile: {0}")]
    Profile(String),

    #[error("runtime: {0}")]
    Runtime(String),

    #[error("training diverged in stage {stage} epoch {epoch}: loss {loss}")]
    Divergence { stage: u8, epoch: usize, loss: f64 },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Usage(_) => ErrorCategory::Usage,
            Error::Config(_) | Error::MappingRequired { .. } => ErrorCategory::Config,
            Error::Geometry(_)
            | Error::LabelOutOfRange { .. }
            | Error::InsufficientFrames { .. }
            | Error::Shortfall { .. }
            | Error::Data(_)
            | Error::Parse { .. } => ErrorCategory::Data,
            Error::Asset(_) => ErrorCategory::Asset,
            Error::Profile(_)
            | Error::Runtime(_)
            | Error::Divergence { .. }
            | Error::Io { .. }
            | Error::Image { .. } => ErrorCategory::Runtime,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
