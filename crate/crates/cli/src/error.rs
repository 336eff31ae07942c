use std::process::ExitCode;

use deidseq_core::checkpoint::CheckpointError;
use deidseq_core::corpusgen::CorpusGenError;
use deidseq_core::embeddings::EmbeddingError;
use deidseq_core::ensemble::EnsembleError;
use deidseq_core::eval::EvalError;
use deidseq_core::ingest::IngestError;
use deidseq_core::postprocess::PostprocessError;
use deidseq_core::tagger::TaggerError;

/// Failure classes, each with its own exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        })
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            EmbeddingError::Config(_) | EmbeddingError::DimensionMismatch { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TaggerError> for CliError {
    fn from(e: TaggerError) -> Self {
        match e {
            TaggerError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TaggerError::Embedding(inner) => inner.into(),
            TaggerError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CorpusGenError> for CliError {
    fn from(e: CorpusGenError) -> Self {
        match e {
            CorpusGenError::EmptyClasses | CorpusGenError::UnknownClass(_) | CorpusGenError::Config(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::Config(_) | EnsembleError::EmptyGrid | EnsembleError::CountMismatch { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PostprocessError> for CliError {
    fn from(e: PostprocessError) -> Self {
        CliError::Usage(e.to_string())
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(IngestError, EvalError, CheckpointError);
