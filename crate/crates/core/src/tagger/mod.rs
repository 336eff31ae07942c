//! BiLSTM-CRF sequence labeling.

pub mod crf;
mod labels;
mod model;
mod train;


pub use crf::{crf_log_partition, crf_nll, score_sequence, viterbi_decode};
pub use labels::{LabelInventory, MEDDOCAN_CLASSES};
pub use model::{TaggerModel, TrainingMeta};
pub use train::{train, EpochRecord, TrainConfig, TrainingLog};

use crate::autodiff::AutodiffError;
use crate::checkpoint::CheckpointError;
use crate::embeddings::EmbeddingError;
use crate::eval::EvalError;

#[derive(Debug, thiserror::Error)]
pub enum TaggerError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid label inventory: {0}")]
    Inventory(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("document `{doc_id}`: label {label} is not in the inventory")]
    UnknownLabel { doc_id: String, label: String },
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
