//! Token-level detector: a frozen causal decoder produces per-token
//! representations of width `C`; each token's representation is concatenated
//! with that of the last real token of its row (width `2C`) and fed to a
//! linear head with a sigmoid. Only the head is trained.

mod backbone;
mod head;
mod schedule;
mod tensor;
mod train;

pub use backbone::{Backbone, BackboneConfig};
pub use head::{bce_loss_and_grad, build_features, head_predict, sigmoid, HeadParams, LossAndGrad};
pub use schedule::lr_at;
pub use tensor::{Tensor3, TokenBatch};
pub use train::{
    encode_samples, evaluate_tokens, predict_samples, train, Adam, EncodedSample, EpochSummary, StepLog, TrainConfig, TrainOutcome,
};

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectorError {
    #[error("sequence of {len} tokens exceeds the backbone limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} is outside the backbone vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("row {0} has no real tokens")]
    EmptyRow(usize),
    #[error("every position is masked")]
    AllMasked,
    #[error("row {0} is not left-padded")]
    NotLeftPadded(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Default decision threshold: a token is predicted AI when `p >= 0.5`.
pub const THRESHOLD: f64 = 0.5;
