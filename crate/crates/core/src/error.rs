use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding a binary feature or representation file.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureFileError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated")]
    TruncatedFile,
    #[error("unsupported dtype code {0}")]
    DtypeUnsupported(u32),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies behind the camera (z = {0})")]
    PointBehindCamera(f64),
    #[error("bounding box has zero area")]
    DegenerateBox,
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("nothing was rendered inside the viewport")]
    EmptyRender,
    #[error("depth must be positive")]
    ZeroDepth,
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("feature file {}: {source}", path.display())]
    FeatureFile {
        path: PathBuf,
        #[source]
        source: FeatureFileError,
    },
    #[error("corrupt representation archive: {0}")]
    CorruptArchive(String),
    #[error("fewer than {0} linearly independent descriptor directions")]
    RankDeficient(usize),
    #[error("need at least {needed} distinct samples, got {available}")]
    TooFewSamples { needed: usize, available: usize },
    #[error("descriptor set is empty")]
    EmptyDescriptorSet,
    #[error("no valid patches inside the mask")]
    NoValidPatches,
    #[error("templates carry no global descriptors")]
    GlobalDescriptorsAbsent,
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("no pose model found")]
    NoModelFound,
    #[error("mask is empty")]
    EmptyMask,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {}: {message}", path.display())]
    Image { path: PathBuf, message: String },
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn at_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// The error with stage labels removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by unreadable or missing files.
    pub fn is_io(&self) -> bool {
        matches!(self.root(), Error::Io { .. } | Error::Image { .. })
    }

    /// True for errors caused by malformed configuration or inconsistent inputs.
    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::InvalidConfig(_)
                | Error::Parse { .. }
                | Error::DimMismatch { .. }
                | Error::SizeMismatch(_)
                | Error::InvalidIntrinsics(_)
                | Error::FeatureFile { .. }
                | Error::CorruptArchive(_)
        )
    }
}
