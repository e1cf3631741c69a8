use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can report. The variant name doubles as the
/// stable one-line code printed by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("MalformedHeader: {0}")]
    MalformedHeader(String),
    #[error("TruncatedPayload: expected {expected} payload bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("IoFailure: {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("InvalidVolume: {0}")]
    InvalidVolume(String),
    #[error("MissingFile: {0}")]
    MissingFile(PathBuf),
    #[error("EmptyLabeledSet: manifest {0} lists no labeled cases")]
    EmptyLabeledSet(PathBuf),
    #[error("MalformedManifest: {0}")]
    MalformedManifest(String),
    #[error("EmptyDataset: no image volumes to fingerprint")]
    EmptyDataset,
    #[error("InfeasiblePlan: {0}")]
    InfeasiblePlan(String),
    #[error("InterpolationOnLabels: label volumes only support nearest-neighbour resampling")]
    InterpolationOnLabels,
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("InvalidTarget: {0}")]
    InvalidTarget(String),
    #[error("MissingGroundTruth: supervised loss needs a label map")]
    MissingGroundTruth,
    #[error("NonFiniteGradient: {0}")]
    NonFiniteGradient(String),
    #[error("NonFiniteLoss: {message} (last good checkpoint: {last_checkpoint})")]
    NonFiniteLoss {
        message: String,
        last_checkpoint: String,
    },
    #[error("ResumeMismatch: {0}")]
    ResumeMismatch(String),
    #[error("MissingCase: {0}")]
    MissingCase(String),
    #[error("PlacementFailure: could not place organ {organ} after {attempts} attempts")]
    PlacementFailure { organ: usize, attempts: usize },
    #[error("MalformedCheckpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("ConfigError: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    /// Short identifier, e.g. `EmptyLabeledSet`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::IoFailure { .. } => "IoFailure",
            Error::InvalidVolume(_) => "InvalidVolume",
            Error::MissingFile(_) => "MissingFile",
            Error::EmptyLabeledSet(_) => "EmptyLabeledSet",
            Error::MalformedManifest(_) => "MalformedManifest",
            Error::EmptyDataset => "EmptyDataset",
            Error::InfeasiblePlan(_) => "InfeasiblePlan",
            Error::InterpolationOnLabels => "InterpolationOnLabels",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidTarget(_) => "InvalidTarget",
            Error::MissingGroundTruth => "MissingGroundTruth",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::ResumeMismatch(_) => "ResumeMismatch",
            Error::MissingCase(_) => "MissingCase",
            Error::PlacementFailure { .. } => "PlacementFailure",
            Error::MalformedCheckpoint(_) => "MalformedCheckpoint",
            Error::Config(_) => "ConfigError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
