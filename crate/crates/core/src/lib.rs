//! Multi-stream speech/text language modeling with delay interleaving.
//!
//! Speech frames carry one semantic token and `N - 1` acoustic tokens; text
//! frames carry one text token padded to `N` streams. Streams are delayed so
//! that a causal transformer predicts a whole delayed frame per step while
//! keeping intra-frame autoregression.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod infer;
pub mod interleave;
pub mod model;
pub mod sequence;
pub mod tensor;
pub mod toycodec;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use infer::{decode_asr, decode_tts, DecodeMode, DecodeParams};
pub use interleave::{delay, insert_border_pads, undelay, DelayedMatrix, FrameMatrix, Modality};
pub use model::{init_model, KvCache, Logits, ModelConfig, ModelState, Params};
pub use sequence::{compose, ComposeParts, LossRegion, Task, TaskSequence, TrainExample, WeightPolicy};
pub use train::{AdamW, AdamWConfig, Phase, TrainSchedule};
pub use vocab::{build_vocab, JointVocab, Special, TokenClass, TokenId, PAD};
