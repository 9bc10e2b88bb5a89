use phaseseg_core::astgcn::EncoderError;
use phaseseg_core::metrics::MetricsError;
use phaseseg_core::pose_io::PoseError;
use phaseseg_core::projector::ProjectorError;
use phaseseg_core::synth::SynthError;
use phaseseg_core::tape::TapeError;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Dataset(#[from] PoseError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Checkpoint(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
    #[error("video '{0}' has no ground-truth labels")]
    MissingLabels(String),
    #[error("unknown video id '{0}'")]
    UnknownVideo(String),
    #[error("no segmentation for '{0}'; run `segment` first")]
    MissingSegmentation(String),
}

impl CliError {
    /// Short machine-readable category for the `error: <kind>: ...` line.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Dataset(_) => "dataset",
            CliError::Synth(_) => "synth",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Encoder(_) => "encoder",
            CliError::Projector(_) => "projector",
            CliError::Metrics(_) => "metrics",
            CliError::Csv { .. } => "csv",
            CliError::MissingLabels(_) => "labels",
            CliError::UnknownVideo(_) => "unknown-video",
            CliError::MissingSegmentation(_) => "segmentation",
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn csv(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn checkpoint(path: &Path, e: TapeError) -> Self {
        CliError::Checkpoint(format!("{}: {e}", path.display()))
    }
}
