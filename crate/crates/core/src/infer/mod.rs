//! Greedy and top-k decoding for ASR and TTS.

mod decode;
mod sample;

pub use decode::{decode_asr, decode_tts, speech_legal_set, text_legal_set, AsrOutput, TtsOutput};
pub use sample::{argmax_legal, choose, sample_topk, DecodeMode, DecodeParams};
