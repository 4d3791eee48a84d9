use std::fmt;
use std::path::Path;

use nodulekit::annotation::AnnotationError;
use nodulekit::dicom::DicomError;
use nodulekit::eval::{EvalError, PredictionError};
use nodulekit::export::ExportError;
use nodulekit::image::ImageError;
use nodulekit::manifest::ManifestError;
use nodulekit::synth::SynthError;

/// Failure of one run, carrying the process exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, missing inputs.
    Usage(String),
    /// Inputs that parse but violate a contract.
    Data(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(self, path: &Path) -> Self {
        let p = path.display();
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{p}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{p}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{p}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ExportError> for CliError {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::Io { .. } => CliError::Io(e.to_string()),
            ExportError::Image(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::InvalidRatios(_) | ManifestError::AlreadySplit => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            SynthError::Image(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AnnotationError> for CliError {
    fn from(e: AnnotationError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PredictionError> for CliError {
    fn from(e: PredictionError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DicomError> for CliError {
    fn from(e: DicomError) -> Self {
        CliError::Data(e.to_string())
    }
}
