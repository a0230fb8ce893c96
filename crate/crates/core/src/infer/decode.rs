//! Frame-synchronous decoding: one incremental forward call per delayed frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sample::{choose, DecodeParams};
use crate::error::{Error, Result};
use crate::interleave::{delay, FrameMatrix, Modality};
use crate::model::{KvCache, ModelState};
use crate::sequence::{asr_prefix, tts_prefix};
use crate::tensor::Scalar;
use crate::vocab::{JointVocab, Special, TokenClass, TokenId, PAD};

#[derive(Debug, Clone, PartialEq)]
pub struct AsrOutput {
    /// Transcript as local text ids, without the closing `eot`.
    pub text: Vec<u32>,
    pub truncated: bool,
    /// Incremental forward calls issued.
    pub steps: usize,
    /// Every delayed frame fed to the model, row-major.
    pub fed: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtsOutput {
    /// Generated speech frames, without the closing `eos_speech` frame.
    pub speech: FrameMatrix,
    pub truncated: bool,
    pub steps: usize,
    pub fed: Vec<TokenId>,
}

struct Session<'a, F> {
    state: &'a ModelState<F>,
    cache: KvCache<F>,
    fed: Vec<TokenId>,
}

impl<'a, F: Scalar> Session<'a, F> {
    fn new(state: &'a ModelState<F>) -> Self {
        Session {
            state,
            cache: KvCache::new(state),
            fed: Vec::new(),
        }
    }

    fn feed(&mut self, frame: &[TokenId]) -> Result<Vec<F>> {
        self.fed.extend_from_slice(frame);
        self.state.forward_step(&mut self.cache, frame)
    }

    fn steps(&self) -> usize {
        self.cache.len()
    }
}

fn legal_mask(vocab: &JointVocab, classes: &[TokenClass]) -> Vec<bool> {
    let mut mask = vec![false; vocab.total_size()];
    for &c in classes {
        mask[vocab.range(c)].iter_mut().for_each(|m| *m = true);
    }
    mask
}

/// Legal output set of stream `n` (0-based) while generating speech.
pub fn speech_legal_set(vocab: &JointVocab, n: usize) -> Vec<bool> {
    if n == 0 {
        legal_mask(vocab, &[TokenClass::Semantic, TokenClass::Special(Special::EosSpeech)])
    } else {
        legal_mask(vocab, &[TokenClass::Acoustic(n), TokenClass::Special(Special::Pad)])
    }
}

/// Legal output set of stream 1 while generating a transcript.
pub fn text_legal_set(vocab: &JointVocab) -> Vec<bool> {
    legal_mask(vocab, &[TokenClass::Text, TokenClass::Special(Special::Eot)])
}

fn stream<F>(logits: &[F], n: usize, v: usize) -> &[F] {
    &logits[n * v..(n + 1) * v]
}

/// Transcribes `speech`. Streams 2..N of every generated frame are pad.
pub fn decode_asr<F: Scalar>(state: &ModelState<F>, speech: &FrameMatrix, params: &DecodeParams) -> Result<AsrOutput> {
    params.validate()?;
    let vocab = &state.vocab;
    let (ns, nv) = (vocab.n_streams, vocab.total_size());
    let prefix = asr_prefix(vocab, speech)?;
    let c = prefix.len();
    if c > state.config.context_len {
        return Err(Error::ContextOverflow {
            len: c,
            context_len: state.config.context_len,
        });
    }
    let delayed = delay(&prefix);
    let legal = text_legal_set(vocab);
    let eot = Special::Eot.id();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut sess = Session::new(state);
    let mut logits = Vec::new();
    for p in 0..c {
        logits = sess.feed(delayed.frame(p))?;
    }

    let mut text = Vec::new();
    let mut truncated = false;
    loop {
        if text.len() >= params.max_frames {
            truncated = true;
            break;
        }
        let tok = choose(stream(&logits, 0, nv), &legal, params, &mut rng)?;
        if tok == eot {
            break;
        }
        text.push(vocab.inverse(tok)?.1);
        if sess.steps() >= state.config.context_len {
            truncated = true;
            break;
        }
        let p = sess.steps();
        let frame: Vec<TokenId> = (0..ns)
            .map(|n| match n {
                0 => tok,
                _ if p >= n && p - n < c => prefix.get(p - n, n),
                _ => PAD,
            })
            .collect();
        logits = sess.feed(&frame)?;
    }
    Ok(AsrOutput {
        text,
        truncated,
        steps: sess.steps(),
        fed: sess.fed,
    })
}

/// Synthesizes speech for local text ids `text` in the voice of `prompt`.
///
/// After stream 1 emits `eos_speech`, `N - 1` more frames complete the
/// delayed acoustic tail; every emitted delayed frame is fed back, so a
/// result of `T` frames (counting the `eos_speech` frame) costs
/// `prompt + T + N - 1` incremental calls.
pub fn decode_tts<F: Scalar>(
    state: &ModelState<F>,
    text: &[u32],
    prompt: &FrameMatrix,
    params: &DecodeParams,
) -> Result<TtsOutput> {
    params.validate()?;
    let vocab = &state.vocab;
    let (ns, nv) = (vocab.n_streams, vocab.total_size());
    let prefix = tts_prefix(vocab, text, prompt)?;
    let c = prefix.len();
    let room = state.config.context_len as i64 - (c + ns) as i64;
    if room < 0 {
        return Err(Error::ContextOverflow {
            len: c + ns,
            context_len: state.config.context_len,
        });
    }
    let limit = params.max_frames.min(room as usize);
    let delayed = delay(&prefix);
    let legal: Vec<Vec<bool>> = (0..ns).map(|n| speech_legal_set(vocab, n)).collect();
    let eos_id = Special::EosSpeech.id();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut sess = Session::new(state);
    let mut logits = Vec::new();
    for p in 0..c {
        logits = sess.feed(delayed.frame(p))?;
    }

    // generated source frames, indexed from the end of the prefix
    let mut generated: Vec<Vec<TokenId>> = Vec::new();
    let mut eos: Option<usize> = None;
    let mut truncated = false;
    let mut p = c;
    loop {
        let mut frame = vec![PAD; ns];
        for (n, slot) in frame.iter_mut().enumerate() {
            if p < n {
                continue;
            }
            let s = p - n;
            *slot = if s < c {
                prefix.get(s, n)
            } else if eos.is_some_and(|e| s >= e) {
                PAD
            } else if n == 0 {
                let tok = if s - c >= limit {
                    truncated = true;
                    eos_id
                } else {
                    choose(stream(&logits, 0, nv), &legal[0], params, &mut rng)?
                };
                generated.push(vec![PAD; ns]);
                generated[s - c][0] = tok;
                tok
            } else {
                let tok = choose(stream(&logits, n, nv), &legal[n], params, &mut rng)?;
                generated[s - c][n] = tok;
                tok
            };
        }
        if eos.is_none() && frame[0] == eos_id {
            eos = Some(p);
        }
        logits = sess.feed(&frame)?;
        if eos.is_some_and(|e| p == e + ns - 1) {
            break;
        }
        p += 1;
    }

    let n_speech = eos.expect("loop exits after eos") - c;
    let mut speech = FrameMatrix::new(ns);
    for f in &generated[..n_speech] {
        speech.push(f, Modality::Speech);
    }
    Ok(TtsOutput {
        speech,
        truncated,
        steps: sess.steps(),
        fed: sess.fed,
    })
}
