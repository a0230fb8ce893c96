//! Delay interleaving of multi-stream frame sequences.
//!
//! Stream `n` (0-based here) is shifted down by `n` frames, so a `T`-frame
//! sequence becomes `T + N - 1` delayed frames:
//!
//! ```text
//!   frames          delayed
//!   a0 a1 a2        a0 ∅  ∅
//!   b0 b1 b2   ->   b0 a1 ∅
//!                   ∅  b1 a2
//!                   ∅  ∅  b2
//! ```
//!
//! Positions that fall outside the source (the leading and trailing
//! triangles) hold the pad token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{JointVocab, Special, TokenClass, TokenId, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Speech,
    Special,
}

/// `T x N` grid of global token ids, row-major by frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMatrix {
    n_streams: usize,
    tokens: Vec<TokenId>,
    modality: Vec<Modality>,
}

impl FrameMatrix {
    pub fn new(n_streams: usize) -> Self {
        assert!(n_streams >= 1, "n_streams must be >= 1");
        FrameMatrix {
            n_streams,
            tokens: Vec::new(),
            modality: Vec::new(),
        }
    }

    pub fn from_parts(n_streams: usize, tokens: Vec<TokenId>, modality: Vec<Modality>) -> Result<Self> {
        if n_streams == 0 || tokens.len() != modality.len() * n_streams {
            return Err(Error::InvalidFrames(format!(
                "{} tokens do not form {} frames of {} streams",
                tokens.len(),
                modality.len(),
                n_streams
            )));
        }
        Ok(FrameMatrix {
            n_streams,
            tokens,
            modality,
        })
    }

    pub fn push(&mut self, frame: &[TokenId], modality: Modality) {
        assert_eq!(frame.len(), self.n_streams, "frame width");
        self.tokens.extend_from_slice(frame);
        self.modality.push(modality);
    }

    /// Frame with `id` on stream 1 and pads elsewhere.
    pub fn push_single(&mut self, id: TokenId, modality: Modality) {
        self.tokens.push(id);
        self.tokens.extend(std::iter::repeat_n(PAD, self.n_streams - 1));
        self.modality.push(modality);
    }

    pub fn push_pad_frame(&mut self) {
        self.push_single(PAD, Modality::Special);
    }

    pub fn extend(&mut self, other: &FrameMatrix) {
        assert_eq!(self.n_streams, other.n_streams);
        self.tokens.extend_from_slice(&other.tokens);
        self.modality.extend_from_slice(&other.modality);
    }

    pub fn n_streams(&self) -> usize {
        self.n_streams
    }

    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[TokenId] {
        &self.tokens[t * self.n_streams..(t + 1) * self.n_streams]
    }

    pub fn get(&self, t: usize, n: usize) -> TokenId {
        self.tokens[t * self.n_streams + n]
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn frames(&self) -> impl Iterator<Item = &[TokenId]> {
        self.tokens.chunks_exact(self.n_streams)
    }

    /// Sub-range of frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> FrameMatrix {
        FrameMatrix {
            n_streams: self.n_streams,
            tokens: self.tokens[start * self.n_streams..end * self.n_streams].to_vec(),
            modality: self.modality[start..end].to_vec(),
        }
    }

    fn is_pad_frame(&self, t: usize) -> bool {
        self.modality[t] == Modality::Special && self.frame(t).iter().all(|&x| x == PAD)
    }

    /// Checks per-modality stream classes against `vocab`.
    pub fn validate(&self, vocab: &JointVocab) -> Result<()> {
        if self.n_streams != vocab.n_streams {
            return Err(Error::InvalidFrames(format!(
                "matrix has {} streams, vocabulary {}",
                self.n_streams, vocab.n_streams
            )));
        }
        for (t, (frame, &m)) in self.frames().zip(&self.modality).enumerate() {
            for &id in frame {
                vocab.classify(id)?;
            }
            let bad = |why: &str| Err(Error::InvalidFrames(format!("frame {t}: {why}")));
            match m {
                Modality::Text | Modality::Special => {
                    if frame[1..].iter().any(|&x| x != PAD) {
                        return bad("text/special frame with non-pad tokens on streams 2..N");
                    }
                    let c = vocab.classify(frame[0])?;
                    let ok = match m {
                        Modality::Text => c == TokenClass::Text,
                        _ => matches!(c, TokenClass::Special(_)),
                    };
                    if !ok {
                        return bad("stream 1 token class does not match frame modality");
                    }
                }
                Modality::Speech => {
                    if frame[0] != PAD && vocab.classify(frame[0])? != TokenClass::Semantic {
                        return bad("speech frame stream 1 is not semantic");
                    }
                    for (n, &id) in frame.iter().enumerate().skip(1) {
                        if id != PAD && vocab.classify(id)? != TokenClass::Acoustic(n) {
                            return bad("speech frame acoustic token on the wrong stream");
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// `(T + N - 1) x N` delayed view of a [`FrameMatrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayedMatrix {
    n_streams: usize,
    tokens: Vec<TokenId>,
    source_modality: Vec<Modality>,
}

impl DelayedMatrix {
    pub fn from_parts(n_streams: usize, tokens: Vec<TokenId>, source_modality: Vec<Modality>) -> Result<Self> {
        let t = source_modality.len();
        if n_streams == 0 || tokens.len() != (t + n_streams - 1) * n_streams {
            return Err(Error::InvalidFrames(format!(
                "{} tokens cannot be a delayed view of {t} frames x {n_streams} streams",
                tokens.len()
            )));
        }
        Ok(DelayedMatrix {
            n_streams,
            tokens,
            source_modality,
        })
    }

    pub fn n_streams(&self) -> usize {
        self.n_streams
    }

    /// Number of delayed frames, `source_len() + N - 1`.
    pub fn len(&self) -> usize {
        self.tokens.len() / self.n_streams
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source_modality.len()
    }

    pub fn frame(&self, t: usize) -> &[TokenId] {
        &self.tokens[t * self.n_streams..(t + 1) * self.n_streams]
    }

    pub fn get(&self, t: usize, n: usize) -> TokenId {
        self.tokens[t * self.n_streams + n]
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn frames(&self) -> impl Iterator<Item = &[TokenId]> {
        self.tokens.chunks_exact(self.n_streams)
    }
}

/// Delays a row-major `T x N` grid of arbitrary values, filling with `fill`.
pub fn delay_values<V: Copy>(values: &[V], n_streams: usize, fill: V) -> Vec<V> {
    assert_eq!(values.len() % n_streams, 0);
    let t = values.len() / n_streams;
    let len = t + n_streams - 1;
    let mut out = vec![fill; len * n_streams];
    for (n, _) in (0..n_streams).enumerate() {
        for s in 0..t {
            out[(s + n) * n_streams + n] = values[s * n_streams + n];
        }
    }
    out
}

/// Delayed-frame index at which source frame `t`, stream `n` (both 0-based) lands.
pub fn delayed_position(t: usize, n: usize) -> usize {
    t + n
}

pub fn delay(x: &FrameMatrix) -> DelayedMatrix {
    DelayedMatrix {
        n_streams: x.n_streams,
        tokens: delay_values(&x.tokens, x.n_streams, PAD),
        source_modality: x.modality.clone(),
    }
}

pub fn undelay(d: &DelayedMatrix) -> Result<FrameMatrix> {
    let n_streams = d.n_streams;
    let t = d.source_len();
    let mut tokens = vec![PAD; t * n_streams];
    for p in 0..d.len() {
        for n in 0..n_streams {
            let id = d.get(p, n);
            match p.checked_sub(n) {
                Some(s) if s < t => tokens[s * n_streams + n] = id,
                _ if id != PAD => return Err(Error::ForcedPadViolation { frame: p, stream: n }),
                _ => {}
            }
        }
    }
    FrameMatrix::from_parts(n_streams, tokens, d.source_modality.clone())
}

/// Inserts `N - 1` all-pad frames after every speech segment.
///
/// A speech segment is a maximal run of speech frames, where a `cont` frame
/// sitting between two speech frames is part of the run, extended by a
/// directly following `eos_speech` frame. Pads are skipped when the segment
/// is already followed by `N - 1` pad frames, which makes the transform
/// idempotent. Text-to-speech borders are left unchanged.
pub fn insert_border_pads(x: &FrameMatrix) -> FrameMatrix {
    let n = x.n_streams;
    let mut out = FrameMatrix::new(n);
    if n == 1 {
        return x.clone();
    }
    let is_speech = |t: usize| x.modality[t] == Modality::Speech;
    let is_delim = |t: usize, s: Special| x.modality[t] == Modality::Special && x.get(t, 0) == s.id();
    let len = x.len();
    let mut t = 0;
    while t < len {
        if !is_speech(t) {
            out.push(x.frame(t), x.modality[t]);
            t += 1;
            continue;
        }
        let mut end = t;
        loop {
            while end < len && is_speech(end) {
                end += 1;
            }
            if end + 1 < len && is_delim(end, Special::Cont) && is_speech(end + 1) {
                end += 1;
                continue;
            }
            break;
        }
        if end < len && is_delim(end, Special::EosSpeech) {
            end += 1;
        }
        for s in t..end {
            out.push(x.frame(s), x.modality[s]);
        }
        let already_padded = end + n - 1 <= len && (end..end + n - 1).all(|s| x.is_pad_frame(s));
        if !already_padded {
            for _ in 0..n - 1 {
                out.push_pad_frame();
            }
        }
        t = end;
    }
    out
}
