//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("token id {id} out of range (vocabulary size {size})")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("local id {local} out of range for {class} (size {size})")]
    LocalOutOfRange {
        class: String,
        local: u32,
        size: usize,
    },

    #[error("invalid frame matrix: {0}")]
    InvalidFrames(String),

    #[error("delayed matrix has a non-pad token at forced-pad position (frame {frame}, stream {stream})")]
    ForcedPadViolation { frame: usize, stream: usize },

    #[error("cannot compose {task} sequence: {reason}")]
    Compose { task: String, reason: String },

    #[error("sequence `{id}` has {len} delayed frames, longer than the context of {context_len}")]
    SequenceTooLong {
        id: String,
        len: usize,
        context_len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("context overflow: {len} positions exceed context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },

    #[error("no supervised positions in batch")]
    EmptyMask,

    #[error("non-finite loss {loss} at step {step} (batch {batch})")]
    NonFiniteLoss { step: u64, batch: u64, loss: f64 },

    #[error("step {step} outside schedule range [0, {max}]")]
    StepOutOfRange { step: u64, max: u64 },

    #[error("empty legal token set")]
    EmptyLegalSet,

    #[error("codec error: {0}")]
    Codec(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
