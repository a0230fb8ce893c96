//! Task sequence composition, loss regions and per-token loss weights.

mod pack;

pub use pack::{pack_batches, pack_rows, Batch, BatchSampler, PackedRow};

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::{delay, delay_values, DelayedMatrix, FrameMatrix, Modality};
use crate::vocab::{JointVocab, Special, TokenClass, TokenId, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(rename = "textlm")]
    TextLm,
    #[serde(rename = "audiolm")]
    AudioLm,
    Asr,
    Tts,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::TextLm, Task::AudioLm, Task::Asr, Task::Tts];

    pub fn token(self) -> Special {
        match self {
            Task::TextLm => Special::TaskTextLm,
            Task::AudioLm => Special::TaskAudioLm,
            Task::Asr => Special::TaskAsr,
            Task::Tts => Special::TaskTts,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::TextLm => "textlm",
            Task::AudioLm => "audiolm",
            Task::Asr => "asr",
            Task::Tts => "tts",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossRegion {
    Whole,
    Target,
}

/// Per-token loss weights by token source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightPolicy {
    pub w_text: f32,
    pub w_semantic: f32,
    pub w_acoustic: f32,
}

impl WeightPolicy {
    /// `text : semantic : acoustic = 1 : 1/2 : 1/(N-1)` per token.
    pub fn default_for(n_streams: usize) -> Self {
        let w_acoustic = if n_streams > 1 { 1.0 / (n_streams - 1) as f32 } else { 1.0 };
        WeightPolicy {
            w_text: 1.0,
            w_semantic: 0.5,
            w_acoustic,
        }
    }

    /// Variant where one speech frame sums to 1: `1 : 1/2 : 1/(2(N-1))`.
    pub fn frame_normalized(n_streams: usize) -> Self {
        let w_acoustic = if n_streams > 1 { 0.5 / (n_streams - 1) as f32 } else { 0.5 };
        WeightPolicy {
            w_text: 1.0,
            w_semantic: 0.5,
            w_acoustic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in [self.w_text, self.w_semantic, self.w_acoustic] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn weight(&self, class: TokenClass) -> f32 {
        match class {
            TokenClass::Special(Special::Pad) => 0.0,
            TokenClass::Special(_) | TokenClass::Text => self.w_text,
            TokenClass::Semantic => self.w_semantic,
            TokenClass::Acoustic(_) => self.w_acoustic,
        }
    }
}

/// A composed training example: frames, task and target region.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub task: Task,
    pub frames: FrameMatrix,
    /// Frame range (0-based, half-open) holding the prediction target.
    pub target_span: Range<usize>,
}

/// Optional inputs to [`compose`]; which ones are required depends on the task.
#[derive(Debug, Clone, Copy, Default)]
pub struct ComposeParts<'a> {
    /// Local text ids.
    pub text: Option<&'a [u32]>,
    /// Speech frames (global ids): the utterance for AudioLM/ASR, the target for TTS.
    pub speech: Option<&'a FrameMatrix>,
    /// Speaker prompt speech for TTS.
    pub prompt: Option<&'a FrameMatrix>,
}

fn compose_err(task: Task, reason: impl Into<String>) -> Error {
    Error::Compose {
        task: task.to_string(),
        reason: reason.into(),
    }
}

fn require_text(task: Task, vocab: &JointVocab, text: Option<&[u32]>) -> Result<Vec<TokenId>> {
    let text = text.ok_or_else(|| compose_err(task, "missing text"))?;
    if text.is_empty() {
        return Err(compose_err(task, "empty text"));
    }
    text.iter().map(|&l| vocab.text(l)).collect()
}

fn require_speech<'a>(
    task: Task,
    vocab: &JointVocab,
    what: &str,
    speech: Option<&'a FrameMatrix>,
) -> Result<&'a FrameMatrix> {
    let speech = speech.ok_or_else(|| compose_err(task, format!("missing {what}")))?;
    if speech.is_empty() {
        return Err(compose_err(task, format!("empty {what}")));
    }
    if speech.modality().iter().any(|&m| m != Modality::Speech) {
        return Err(compose_err(task, format!("{what} contains non-speech frames")));
    }
    speech
        .validate(vocab)
        .map_err(|e| compose_err(task, format!("{what}: {e}")))?;
    Ok(speech)
}

fn push_text(x: &mut FrameMatrix, ids: &[TokenId]) {
    for &id in ids {
        x.push_single(id, Modality::Text);
    }
}

fn push_special(x: &mut FrameMatrix, s: Special) {
    x.push_single(s.id(), Modality::Special);
}

fn push_border_pads(x: &mut FrameMatrix) {
    for _ in 1..x.n_streams() {
        x.push_pad_frame();
    }
}

/// `[task_asr][sos_speech] speech [eos_speech] pads`: the part of an ASR
/// sequence that precedes the transcript.
pub fn asr_prefix(vocab: &JointVocab, speech: &FrameMatrix) -> Result<FrameMatrix> {
    let speech = require_speech(Task::Asr, vocab, "speech", Some(speech))?;
    let mut x = FrameMatrix::new(vocab.n_streams);
    push_special(&mut x, Special::TaskAsr);
    push_special(&mut x, Special::SosSpeech);
    x.extend(speech);
    push_special(&mut x, Special::EosSpeech);
    push_border_pads(&mut x);
    Ok(x)
}

/// `[task_tts] text [eot] [sos_speech] prompt [cont]`: the part of a TTS
/// sequence that precedes the target speech.
pub fn tts_prefix(vocab: &JointVocab, text: &[u32], prompt: &FrameMatrix) -> Result<FrameMatrix> {
    let text = require_text(Task::Tts, vocab, Some(text))?;
    let prompt = require_speech(Task::Tts, vocab, "prompt", Some(prompt))?;
    let mut x = FrameMatrix::new(vocab.n_streams);
    push_special(&mut x, Special::TaskTts);
    push_text(&mut x, &text);
    push_special(&mut x, Special::Eot);
    push_special(&mut x, Special::SosSpeech);
    x.extend(prompt);
    push_special(&mut x, Special::Cont);
    Ok(x)
}

/// Builds the frame layout of one task:
///
/// ```text
/// TextLM : [task] text [eot]
/// AudioLM: [task][sos] speech [eos] pads
/// ASR    : [task][sos] speech [eos] pads text [eot]           target = text [eot]
/// TTS    : [task] text [eot] [sos] prompt [cont] target [eos] pads   target = target [eos]
/// ```
///
/// `pads` are the `N - 1` border pad frames. The result is a fixed point of
/// [`crate::interleave::insert_border_pads`].
pub fn compose(vocab: &JointVocab, task: Task, parts: ComposeParts<'_>) -> Result<TaskSequence> {
    let n = vocab.n_streams;
    let mut x = FrameMatrix::new(n);
    let target_span = match task {
        Task::TextLm => {
            let text = require_text(task, vocab, parts.text)?;
            push_special(&mut x, Special::TaskTextLm);
            push_text(&mut x, &text);
            push_special(&mut x, Special::Eot);
            1..x.len()
        }
        Task::AudioLm => {
            let speech = require_speech(task, vocab, "speech", parts.speech)?;
            push_special(&mut x, Special::TaskAudioLm);
            push_special(&mut x, Special::SosSpeech);
            x.extend(speech);
            push_special(&mut x, Special::EosSpeech);
            push_border_pads(&mut x);
            1..x.len()
        }
        Task::Asr => {
            let speech = require_speech(task, vocab, "speech", parts.speech)?;
            let text = require_text(task, vocab, parts.text)?;
            x = asr_prefix(vocab, speech)?;
            let start = x.len();
            push_text(&mut x, &text);
            push_special(&mut x, Special::Eot);
            start..x.len()
        }
        Task::Tts => {
            let text = parts.text.ok_or_else(|| compose_err(task, "missing text"))?;
            let prompt = parts.prompt.ok_or_else(|| compose_err(task, "missing prompt"))?;
            let target = require_speech(task, vocab, "target speech", parts.speech)?;
            x = tts_prefix(vocab, text, prompt)?;
            let start = x.len();
            x.extend(target);
            push_special(&mut x, Special::EosSpeech);
            let end = x.len();
            push_border_pads(&mut x);
            start..end
        }
    };
    Ok(TaskSequence {
        task,
        frames: x,
        target_span,
    })
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Delayed length, `T + N - 1`.
    pub fn delayed_len(&self) -> usize {
        self.frames.len() + self.frames.n_streams() - 1
    }

    /// Row-major `T x N` supervision mask.
    ///
    /// `Whole` covers every non-pad token except the task token in frame 0;
    /// `Target` covers only non-pad tokens inside the target span.
    pub fn loss_mask(&self, region: LossRegion) -> Vec<bool> {
        let n = self.frames.n_streams();
        let span = match region {
            LossRegion::Whole => 1..self.frames.len(),
            LossRegion::Target => self.target_span.clone(),
        };
        self.frames
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, &id)| id != PAD && span.contains(&(i / n)))
            .collect()
    }

    /// Row-major `T x N` per-token weights; pads get 0.
    pub fn token_weights(&self, policy: &WeightPolicy, vocab: &JointVocab) -> Result<Vec<f32>> {
        self.frames
            .tokens()
            .iter()
            .map(|&id| Ok(policy.weight(vocab.classify(id)?)))
            .collect()
    }

    /// Delays the sequence together with its masked weights for both regions.
    pub fn prepare(&self, id: impl Into<String>, policy: &WeightPolicy, vocab: &JointVocab) -> Result<TrainExample> {
        let n = self.frames.n_streams();
        let weights = self.token_weights(policy, vocab)?;
        let masked = |region| -> Vec<f32> {
            let mask = self.loss_mask(region);
            let w: Vec<f32> = weights.iter().zip(&mask).map(|(&w, &m)| if m { w } else { 0.0 }).collect();
            delay_values(&w, n, 0.0)
        };
        Ok(TrainExample {
            id: id.into(),
            task: self.task,
            delayed: delay(&self.frames),
            weights_whole: masked(LossRegion::Whole),
            weights_target: masked(LossRegion::Target),
        })
    }
}

/// A delayed sequence ready for training, with masked weights already
/// carried through the delay.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub task: Task,
    pub delayed: DelayedMatrix,
    pub weights_whole: Vec<f32>,
    pub weights_target: Vec<f32>,
}

impl TrainExample {
    pub fn len(&self) -> usize {
        self.delayed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delayed.is_empty()
    }

    pub fn weights(&self, region: LossRegion) -> &[f32] {
        match region {
            LossRegion::Whole => &self.weights_whole,
            LossRegion::Target => &self.weights_target,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interleave::{insert_border_pads, undelay};
    use crate::vocab::build_vocab;

    fn vocab3() -> JointVocab {
        build_vocab(3, 8, 6, 5).unwrap()
    }

    fn speech(vocab: &JointVocab, len: usize, salt: u32) -> FrameMatrix {
        let mut x = FrameMatrix::new(vocab.n_streams);
        for t in 0..len as u32 {
            let mut f = vec![vocab.semantic((t + salt) % vocab.semantic_size as u32).unwrap()];
            for cb in 1..vocab.n_streams {
                f.push(vocab.acoustic(cb, (t * 3 + salt + cb as u32) % vocab.acoustic_size as u32).unwrap());
            }
            x.push(&f, Modality::Speech);
        }
        x
    }

    fn all_tasks(vocab: &JointVocab) -> Vec<TaskSequence> {
        let s = speech(vocab, 4, 0);
        let p = speech(vocab, 3, 1);
        let text = [1u32, 2];
        Task::ALL
            .iter()
            .map(|&task| {
                compose(
                    vocab,
                    task,
                    ComposeParts {
                        text: Some(&text),
                        speech: Some(&s),
                        prompt: Some(&p),
                    },
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn asr_layout_counts() {
        let v = vocab3();
        let s = speech(&v, 4, 0);
        let seq = compose(
            &v,
            Task::Asr,
            ComposeParts {
                text: Some(&[1, 2]),
                speech: Some(&s),
                prompt: None,
            },
        )
        .unwrap();
        assert_eq!(seq.len(), 1 + 1 + 4 + 1 + 2 + 2 + 1);
        assert_eq!(seq.target_span, 9..12);
        let mask = seq.loss_mask(LossRegion::Target);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 3);
        for t in 9..12 {
            assert!(mask[t * 3]);
        }
    }

    #[test]
    fn textlm_layout() {
        let v = vocab3();
        let seq = compose(
            &v,
            Task::TextLm,
            ComposeParts {
                text: Some(&[0, 1]),
                ..Default::default()
            },
        )
        .unwrap();
        let rows: Vec<&[u32]> = seq.frames.frames().collect();
        assert_eq!(
            rows,
            vec![
                &[Special::TaskTextLm.id(), 0, 0][..],
                &[11, 0, 0][..],
                &[12, 0, 0][..],
                &[Special::Eot.id(), 0, 0][..],
            ]
        );
    }

    #[test]
    fn tts_requires_prompt_and_nonempty_parts() {
        let v = vocab3();
        let s = speech(&v, 4, 0);
        let empty = FrameMatrix::new(3);
        let err = compose(
            &v,
            Task::Tts,
            ComposeParts {
                text: Some(&[1]),
                speech: Some(&s),
                prompt: Some(&empty),
            },
        );
        assert!(err.is_err());
        assert!(compose(&v, Task::Tts, ComposeParts { text: Some(&[1]), speech: Some(&s), prompt: None }).is_err());
        assert!(compose(&v, Task::TextLm, ComposeParts { text: Some(&[]), ..Default::default() }).is_err());
        assert!(compose(&v, Task::Asr, ComposeParts { text: Some(&[1]), speech: None, prompt: None }).is_err());
    }

    #[test]
    fn rejects_speech_with_wrong_stream_classes() {
        let v = vocab3();
        let mut bad = FrameMatrix::new(3);
        // acoustic codebook 2 token on stream 2
        bad.push(&[v.semantic(0).unwrap(), v.acoustic(2, 0).unwrap(), v.acoustic(2, 1).unwrap()], Modality::Speech);
        assert!(compose(&v, Task::AudioLm, ComposeParts { speech: Some(&bad), ..Default::default() }).is_err());
    }

    #[test]
    fn tts_target_span_covers_target_and_eos() {
        let v = vocab3();
        let seqs = all_tasks(&v);
        let tts = &seqs[3];
        // [task] t t [eot] [sos] p p p [cont] s s s s [eos] pad pad
        assert_eq!(tts.len(), 1 + 2 + 1 + 1 + 3 + 1 + 4 + 1 + 2);
        assert_eq!(tts.target_span, 9..14);
        assert_eq!(tts.frames.get(13, 0), Special::EosSpeech.id());
    }

    #[test]
    fn composed_sequences_are_padded_fixed_points() {
        let v = vocab3();
        for seq in all_tasks(&v) {
            seq.frames.validate(&v).unwrap();
            assert_eq!(insert_border_pads(&seq.frames), seq.frames, "{}", seq.task);
            let d = delay(&seq.frames);
            assert_eq!(undelay(&d).unwrap(), seq.frames);
            for frame in d.frames() {
                let text = frame.iter().any(|&id| v.classify(id).unwrap() == TokenClass::Text);
                let ac = frame.iter().any(|&id| matches!(v.classify(id).unwrap(), TokenClass::Acoustic(_)));
                assert!(!(text && ac));
            }
        }
    }

    #[test]
    fn masks_nest_and_skip_pads() {
        let v = vocab3();
        for seq in all_tasks(&v) {
            let whole = seq.loss_mask(LossRegion::Whole);
            let target = seq.loss_mask(LossRegion::Target);
            for (i, (&w, &t)) in whole.iter().zip(&target).enumerate() {
                assert!(!t || w);
                if seq.frames.tokens()[i] == PAD {
                    assert!(!w);
                }
            }
            assert!(!whole[0], "task token is never supervised");
            if matches!(seq.task, Task::TextLm | Task::AudioLm) {
                assert_eq!(whole, target);
            }
        }
    }

    #[test]
    fn default_weights_nine_streams() {
        let v = build_vocab(9, 8, 6, 5).unwrap();
        let p = WeightPolicy::default_for(9);
        assert_eq!(p.weight(v.classify(v.text(0).unwrap()).unwrap()), 1.0);
        assert_eq!(p.weight(v.classify(v.semantic(0).unwrap()).unwrap()), 0.5);
        for cb in 1..9 {
            assert_eq!(p.weight(TokenClass::Acoustic(cb)), 0.125);
        }
        assert_eq!(p.weight(TokenClass::Special(Special::Pad)), 0.0);
        assert_eq!(p.weight(TokenClass::Special(Special::Eot)), 1.0);
        let frame_total: f32 = p.w_semantic + 8.0 * p.w_acoustic;
        assert_eq!(frame_total, 1.5);
        let q = WeightPolicy::frame_normalized(9);
        assert_eq!(q.w_semantic + 8.0 * q.w_acoustic, 1.0);
    }

    #[test]
    fn weights_attach_to_tokens_through_delay() {
        let v = vocab3();
        let p = WeightPolicy::default_for(3);
        for seq in all_tasks(&v) {
            let ex = seq.prepare("x", &p, &v).unwrap();
            // weighting the delayed tokens directly equals delaying the weights
            for (i, &id) in ex.delayed.tokens().iter().enumerate() {
                let direct = p.weight(v.classify(id).unwrap());
                let whole = ex.weights_whole[i];
                assert!(whole == 0.0 || whole == direct);
                if id == PAD {
                    assert_eq!(whole, 0.0);
                }
            }
        }
    }
}
