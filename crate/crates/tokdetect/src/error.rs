use std::path::PathBuf;

use tokdetect_core::corpus::CorpusError;
use tokdetect_core::detector::DetectorError;
use tokdetect_core::evalkit::EvalError;
use tokdetect_core::genpipe::GenpipeError;
use tokdetect_core::sampler::SamplerError;
use tokdetect_core::tokenizer::TokenizerError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: malformed record: {reason}", path.display())]
    MalformedRecord { path: PathBuf, line: usize, reason: String },
    #[error("{}:{line}: missing field `{field}`", path.display())]
    MissingField { path: PathBuf, line: usize, field: &'static str },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("checkpoint {}: {reason}", path.display())]
    CheckpointMismatch { path: PathBuf, reason: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("http: {0}")]
    Http(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Genpipe(#[from] GenpipeError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl std::fmt::Display) -> Self {
        Error::Format { path: path.into(), reason: reason.to_string() }
    }

    /// Usage problems exit with 2, everything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
