//! A synthetic, exactly invertible speech codec.
//!
//! Every character becomes `D` speech frames. The semantic stream carries a
//! fixed permutation of the character index and ignores the speaker. For
//! speaker `s`, character `c` and frame `j` within the character, acoustic
//! codebook `m` carries
//!
//! ```text
//! m = 1 : (s + S·j) mod A
//! m ≥ 2 : (s + S·j + (2m-1)·c + m) mod A
//! ```
//!
//! with `S` speakers and `A` acoustic entries, so the speaker is recoverable
//! from every acoustic token once `c` and `j` are known. Noise replaces
//! acoustic tokens with uniform draws; decoding takes plurality votes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusHeader, CorpusRecord};
use crate::error::{Error, Result};
use crate::interleave::{FrameMatrix, Modality};
use crate::sequence::Task;
use crate::vocab::{JointVocab, TokenClass, PAD};

pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz ";

const LEXICON: [&str; 48] = [
    "a", "an", "the", "cat", "dog", "sun", "sea", "red", "blue", "big", "old", "new", "run", "sat", "sky", "tree",
    "bird", "fish", "rain", "wind", "hill", "road", "home", "door", "book", "lamp", "star", "moon", "cold", "warm",
    "fast", "slow", "green", "light", "stone", "river", "sleep", "quiet", "jump", "walk", "song", "milk", "boat",
    "king", "queen", "fox", "zero", "yes",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecSpec {
    pub frames_per_char: usize,
    pub n_streams: usize,
    pub semantic_size: usize,
    pub acoustic_size: usize,
    pub n_speakers: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for CodecSpec {
    fn default() -> Self {
        CodecSpec {
            frames_per_char: 4,
            n_streams: 3,
            semantic_size: 32,
            acoustic_size: 64,
            n_speakers: 4,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl CodecSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Codec(m));
        if self.frames_per_char == 0 {
            return fail("frames_per_char must be >= 1".into());
        }
        if self.n_streams < 2 {
            return fail("the codec needs at least one acoustic stream".into());
        }
        if self.semantic_size < alphabet_size() {
            return fail(format!("semantic_size {} below alphabet size {}", self.semantic_size, alphabet_size()));
        }
        if self.n_speakers == 0 || self.acoustic_size < self.n_speakers {
            return fail(format!(
                "acoustic_size {} must be >= n_speakers {} >= 1",
                self.acoustic_size, self.n_speakers
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return fail(format!("noise_rate {} outside [0, 1)", self.noise_rate));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<JointVocab> {
        JointVocab::new(self.n_streams, alphabet_size(), self.semantic_size, self.acoustic_size)
    }
}

pub fn alphabet_size() -> usize {
    ALPHABET.len()
}

/// Local text id of a character.
pub fn char_id(ch: char) -> Result<u32> {
    ALPHABET
        .find(ch)
        .map(|i| i as u32)
        .ok_or_else(|| Error::Codec(format!("character {ch:?} outside the alphabet")))
}

pub fn text_to_ids(text: &str) -> Result<Vec<u32>> {
    text.chars().map(char_id).collect()
}

pub fn ids_to_text(ids: &[u32]) -> String {
    ids.iter().map(|&i| ALPHABET.as_bytes().get(i as usize).map_or('?', |&b| b as char)).collect()
}

/// Result of inverting speech frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedSpeech {
    pub text: String,
    pub speaker: Option<usize>,
    /// Frame count was not a multiple of `D`; the last group was partial.
    pub ragged: bool,
    /// No usable semantic token was found.
    pub invalid: bool,
}

#[derive(Debug, Clone)]
pub struct ToyCodec {
    pub spec: CodecSpec,
    pub vocab: JointVocab,
    perm: Vec<u32>,
    inv_perm: Vec<Option<u32>>,
}

fn plurality(votes: &[usize], size: usize) -> Option<usize> {
    let mut counts = vec![0usize; size];
    for &v in votes {
        counts[v] += 1;
    }
    let (best, &n) = counts.iter().enumerate().max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))?;
    (n > 0).then_some(best)
}

impl ToyCodec {
    pub fn new(spec: CodecSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = spec.vocab()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut perm: Vec<u32> = (0..spec.semantic_size as u32).collect();
        perm.shuffle(&mut rng);
        perm.truncate(alphabet_size());
        let mut inv_perm = vec![None; spec.semantic_size];
        for (c, &s) in perm.iter().enumerate() {
            inv_perm[s as usize] = Some(c as u32);
        }
        Ok(ToyCodec {
            spec,
            vocab,
            perm,
            inv_perm,
        })
    }

    fn acoustic_local(&self, m: usize, speaker: usize, j: usize, c: usize) -> u32 {
        let (s_n, a) = (self.spec.n_speakers, self.spec.acoustic_size);
        let base = speaker + s_n * j;
        let v = if m == 1 { base } else { base + (2 * m - 1) * c + m };
        (v % a) as u32
    }

    fn speaker_from(&self, m: usize, local: u32, j: usize, c: usize) -> Option<usize> {
        let a = self.spec.acoustic_size;
        let offset = self.acoustic_local(m, 0, j, c) as usize;
        let s = (local as usize + a - offset) % a;
        (s < self.spec.n_speakers).then_some(s)
    }

    /// Encodes `text` as speech of `speaker`. `noise_seed` drives the
    /// acoustic perturbation and is unused when `noise_rate` is 0.
    pub fn encode_speech(&self, text: &str, speaker: usize, noise_seed: u64) -> Result<FrameMatrix> {
        if speaker >= self.spec.n_speakers {
            return Err(Error::Codec(format!("speaker {speaker} >= {}", self.spec.n_speakers)));
        }
        let ids = text_to_ids(text)?;
        let n = self.spec.n_streams;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut x = FrameMatrix::new(n);
        let mut frame = vec![PAD; n];
        for &c in &ids {
            for j in 0..self.spec.frames_per_char {
                frame[0] = self.vocab.semantic(self.perm[c as usize])?;
                for (m, slot) in frame.iter_mut().enumerate().skip(1) {
                    let mut local = self.acoustic_local(m, speaker, j, c as usize);
                    if self.spec.noise_rate > 0.0 && rng.random::<f64>() < self.spec.noise_rate {
                        local = rng.random_range(0..self.spec.acoustic_size as u32);
                    }
                    *slot = self.vocab.acoustic(m, local)?;
                }
                x.push(&frame, Modality::Speech);
            }
        }
        Ok(x)
    }

    /// Inverts speech frames by plurality vote per `D`-frame group; the
    /// speaker is voted over all acoustic tokens.
    pub fn decode_speech(&self, frames: &FrameMatrix) -> DecodedSpeech {
        let d = self.spec.frames_per_char;
        let mut text = String::new();
        let mut speaker_votes = Vec::new();
        let mut any = false;
        for group in frames.tokens().chunks(d * frames.n_streams()) {
            let rows: Vec<&[u32]> = group.chunks(frames.n_streams()).collect();
            let chars: Vec<usize> = rows
                .iter()
                .filter_map(|f| match self.vocab.inverse(f[0]) {
                    Ok((TokenClass::Semantic, s)) => self.inv_perm[s as usize].map(|c| c as usize),
                    _ => None,
                })
                .collect();
            let Some(c) = plurality(&chars, alphabet_size()) else {
                text.push('?');
                continue;
            };
            any = true;
            text.push(ALPHABET.as_bytes()[c] as char);
            for (j, f) in rows.iter().enumerate() {
                for (m, &id) in f.iter().enumerate().skip(1) {
                    if let Ok((TokenClass::Acoustic(cb), local)) = self.vocab.inverse(id) {
                        if cb == m {
                            speaker_votes.extend(self.speaker_from(m, local, j, c));
                        }
                    }
                }
            }
        }
        DecodedSpeech {
            text,
            speaker: plurality(&speaker_votes, self.spec.n_speakers),
            ragged: !frames.len().is_multiple_of(d),
            invalid: !any,
        }
    }
}

/// Options of corpus generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_utts: usize,
    /// Inclusive range of utterance lengths in characters.
    pub len_range: (usize, usize),
    pub prompt_len_range: (usize, usize),
    /// Share of utterances replaced by long spliced ASR records.
    pub long_form_frac: f64,
    /// Target speech length of a spliced record, in frames.
    pub splice_target_len: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_utts: 2000,
            len_range: (8, 24),
            prompt_len_range: (4, 8),
            long_form_frac: 0.0,
            splice_target_len: 256,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.len_range;
        let (plo, phi) = self.prompt_len_range;
        if lo == 0 || lo > hi || plo == 0 || plo > phi {
            return Err(Error::Codec("length ranges must satisfy 1 <= lo <= hi".into()));
        }
        if !(0.0..=1.0).contains(&self.long_form_frac) {
            return Err(Error::Codec("long_form_frac outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Random lexicon text with a length drawn uniformly from `range` (the
/// result may be shorter by less than one word; never empty).
pub fn random_text(rng: &mut ChaCha8Rng, range: (usize, usize)) -> String {
    let target = rng.random_range(range.0..=range.1);
    let mut out = String::new();
    loop {
        let w = LEXICON[rng.random_range(0..LEXICON.len())];
        let extra = if out.is_empty() { w.len() } else { w.len() + 1 };
        if out.len() + extra > target {
            if out.is_empty() {
                return w[..target.min(w.len())].to_string();
            }
            return out;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(w);
    }
}

fn speech_record(x: &FrameMatrix) -> Vec<Vec<u32>> {
    x.frames().map(|f| f.to_vec()).collect()
}

/// Generates a corpus: four records (ASR, TTS, AudioLM, TextLM) per regular
/// utterance and one spliced ASR record per long-form utterance.
pub fn gen_corpus(codec: &ToyCodec, cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let d = codec.spec.frames_per_char;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    for u in 0..cfg.n_utts {
        let speaker = rng.random_range(0..codec.spec.n_speakers);
        let noise_seed: u64 = rng.random();
        let long = cfg.long_form_frac > 0.0 && rng.random::<f64>() < cfg.long_form_frac;
        if long {
            let mut text = random_text(&mut rng, cfg.len_range);
            while (text.len() + 1) * d <= cfg.splice_target_len {
                let next = random_text(&mut rng, cfg.len_range);
                if (text.len() + 1 + next.len()) * d > cfg.splice_target_len {
                    break;
                }
                text.push(' ');
                text.push_str(&next);
            }
            let room = (cfg.splice_target_len / d).saturating_sub(text.len() + 1);
            if room > 0 {
                text.push(' ');
                text.push_str(&random_text(&mut rng, (room, room)));
            }
            let speech = codec.encode_speech(&text, speaker, noise_seed)?;
            records.push(CorpusRecord {
                id: format!("u{u:06}-long-asr"),
                task: Task::Asr,
                text: Some(text_to_ids(&text)?),
                speech: Some(speech_record(&speech)),
                prompt: None,
                speaker: Some(speaker),
                long_form: true,
            });
            continue;
        }
        let text = random_text(&mut rng, cfg.len_range);
        let prompt_text = random_text(&mut rng, cfg.prompt_len_range);
        let prompt_seed: u64 = rng.random();
        let ids = text_to_ids(&text)?;
        let speech = speech_record(&codec.encode_speech(&text, speaker, noise_seed)?);
        let prompt = speech_record(&codec.encode_speech(&prompt_text, speaker, prompt_seed)?);
        let base = CorpusRecord {
            id: String::new(),
            task: Task::Asr,
            text: None,
            speech: None,
            prompt: None,
            speaker: Some(speaker),
            long_form: false,
        };
        records.push(CorpusRecord {
            id: format!("u{u:06}-asr"),
            task: Task::Asr,
            text: Some(ids.clone()),
            speech: Some(speech.clone()),
            ..base.clone()
        });
        records.push(CorpusRecord {
            id: format!("u{u:06}-tts"),
            task: Task::Tts,
            text: Some(ids.clone()),
            speech: Some(speech.clone()),
            prompt: Some(prompt),
            ..base.clone()
        });
        records.push(CorpusRecord {
            id: format!("u{u:06}-audiolm"),
            task: Task::AudioLm,
            speech: Some(speech),
            ..base.clone()
        });
        records.push(CorpusRecord {
            id: format!("u{u:06}-textlm"),
            task: Task::TextLm,
            text: Some(ids),
            speaker: None,
            ..base
        });
    }
    Ok(Corpus {
        header: CorpusHeader::new(codec.vocab.clone(), Some(codec.spec.clone())),
        records,
    })
}
