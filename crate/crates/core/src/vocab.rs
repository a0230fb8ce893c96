//! Joint token space shared by text, semantic, acoustic and control tokens.
//!
//! Global ids are laid out contiguously in this order:
//!
//! ```text
//! | specials (11) | text | semantic | acoustic cb 1 | ... | acoustic cb N-1 |
//! ```
//!
//! The pad token sits at id 0 so that its embedding row can be pinned to zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Control tokens, in the order they occupy the first global ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    /// End of a text segment.
    Eot,
    SosSpeech,
    EosSpeech,
    TaskTextLm,
    TaskAudioLm,
    TaskAsr,
    TaskTts,
    /// Separates the speaker prompt from the target speech.
    Cont,
}

impl Special {
    pub const ALL: [Special; 11] = [
        Special::Pad,
        Special::Bos,
        Special::Eos,
        Special::Eot,
        Special::SosSpeech,
        Special::EosSpeech,
        Special::TaskTextLm,
        Special::TaskAudioLm,
        Special::TaskAsr,
        Special::TaskTts,
        Special::Cont,
    ];

    /// Global id. Specials occupy the first ids of every vocabulary.
    pub const fn id(self) -> TokenId {
        self as TokenId
    }

    pub fn name(self) -> &'static str {
        match self {
            Special::Pad => "pad",
            Special::Bos => "bos",
            Special::Eos => "eos",
            Special::Eot => "eot",
            Special::SosSpeech => "sos_speech",
            Special::EosSpeech => "eos_speech",
            Special::TaskTextLm => "task_textlm",
            Special::TaskAudioLm => "task_audiolm",
            Special::TaskAsr => "task_asr",
            Special::TaskTts => "task_tts",
            Special::Cont => "cont",
        }
    }

    pub fn from_index(index: usize) -> Option<Special> {
        Special::ALL.get(index).copied()
    }
}

/// The pad token. Always global id 0.
pub const PAD: TokenId = Special::Pad.id();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Special(Special),
    Text,
    Semantic,
    /// Acoustic codebook, 1-based (`1..=N-1`).
    Acoustic(usize),
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenClass::Special(s) => write!(f, "special({})", s.name()),
            TokenClass::Text => f.write_str("text"),
            TokenClass::Semantic => f.write_str("semantic"),
            TokenClass::Acoustic(cb) => write!(f, "acoustic({cb})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointVocab {
    pub n_streams: usize,
    pub text_size: usize,
    pub semantic_size: usize,
    pub acoustic_size: usize,
    pub specials: Vec<String>,
}

impl JointVocab {
    pub fn new(
        n_streams: usize,
        text_size: usize,
        semantic_size: usize,
        acoustic_size: usize,
    ) -> Result<Self> {
        if n_streams == 0 {
            return Err(Error::InvalidVocab("n_streams must be >= 1".into()));
        }
        for (name, size) in [
            ("text_size", text_size),
            ("semantic_size", semantic_size),
            ("acoustic_size", acoustic_size),
        ] {
            if size == 0 {
                return Err(Error::InvalidVocab(format!("{name} must be >= 1")));
            }
        }
        let vocab = JointVocab {
            n_streams,
            text_size,
            semantic_size,
            acoustic_size,
            specials: Special::ALL.iter().map(|s| s.name().to_string()).collect(),
        };
        if vocab.total_size() > u32::MAX as usize {
            return Err(Error::InvalidVocab("vocabulary exceeds u32 id space".into()));
        }
        Ok(vocab)
    }

    /// Checks a deserialized vocabulary against the fixed special-token list.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = JointVocab::new(
            self.n_streams,
            self.text_size,
            self.semantic_size,
            self.acoustic_size,
        )?;
        if rebuilt.specials != self.specials {
            return Err(Error::InvalidVocab(format!(
                "unexpected special tokens {:?}",
                self.specials
            )));
        }
        Ok(())
    }

    pub fn n_codebooks(&self) -> usize {
        self.n_streams - 1
    }

    pub fn n_specials(&self) -> usize {
        self.specials.len()
    }

    pub fn total_size(&self) -> usize {
        self.n_specials() + self.text_size + self.semantic_size + self.n_codebooks() * self.acoustic_size
    }

    pub fn text_offset(&self) -> usize {
        self.n_specials()
    }

    pub fn semantic_offset(&self) -> usize {
        self.text_offset() + self.text_size
    }

    /// First global id of acoustic codebook `codebook` (1-based).
    pub fn acoustic_offset(&self, codebook: usize) -> usize {
        self.semantic_offset() + self.semantic_size + (codebook - 1) * self.acoustic_size
    }

    /// Half-open global id range of a class.
    pub fn range(&self, class: TokenClass) -> std::ops::Range<usize> {
        match class {
            TokenClass::Special(s) => s.id() as usize..s.id() as usize + 1,
            TokenClass::Text => self.text_offset()..self.semantic_offset(),
            TokenClass::Semantic => self.semantic_offset()..self.semantic_offset() + self.semantic_size,
            TokenClass::Acoustic(cb) => {
                let start = self.acoustic_offset(cb);
                start..start + self.acoustic_size
            }
        }
    }

    pub fn classify(&self, id: TokenId) -> Result<TokenClass> {
        let g = id as usize;
        if g >= self.total_size() {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.total_size(),
            });
        }
        Ok(if g < self.text_offset() {
            TokenClass::Special(Special::ALL[g])
        } else if g < self.semantic_offset() {
            TokenClass::Text
        } else if g < self.semantic_offset() + self.semantic_size {
            TokenClass::Semantic
        } else {
            let rel = g - self.semantic_offset() - self.semantic_size;
            TokenClass::Acoustic(rel / self.acoustic_size + 1)
        })
    }

    /// Local id within `class` to global id.
    ///
    /// For `Special(s)` the only valid local id is the special's own index, which
    /// keeps `map_token` and [`JointVocab::inverse`] an exact bijection.
    pub fn map_token(&self, class: TokenClass, local: u32) -> Result<TokenId> {
        let out_of_range = |size: usize| Error::LocalOutOfRange {
            class: class.to_string(),
            local,
            size,
        };
        match class {
            TokenClass::Special(s) => {
                if local != s.id() {
                    return Err(out_of_range(self.n_specials()));
                }
                Ok(s.id())
            }
            TokenClass::Acoustic(cb) if cb == 0 || cb > self.n_codebooks() => {
                Err(Error::InvalidVocab(format!(
                    "codebook {cb} outside 1..={}",
                    self.n_codebooks()
                )))
            }
            _ => {
                let range = self.range(class);
                if local as usize >= range.len() {
                    return Err(out_of_range(range.len()));
                }
                Ok((range.start + local as usize) as TokenId)
            }
        }
    }

    /// Global id to `(class, local id)`.
    pub fn inverse(&self, id: TokenId) -> Result<(TokenClass, u32)> {
        let class = self.classify(id)?;
        let local = id - self.range(class).start as u32;
        Ok(match class {
            TokenClass::Special(s) => (class, s.id()),
            _ => (class, local),
        })
    }

    pub fn text(&self, local: u32) -> Result<TokenId> {
        self.map_token(TokenClass::Text, local)
    }

    pub fn semantic(&self, local: u32) -> Result<TokenId> {
        self.map_token(TokenClass::Semantic, local)
    }

    pub fn acoustic(&self, codebook: usize, local: u32) -> Result<TokenId> {
        self.map_token(TokenClass::Acoustic(codebook), local)
    }

    /// True when `id` is a text token or a non-pad special.
    pub fn is_text_like(&self, id: TokenId) -> bool {
        matches!(
            self.classify(id),
            Ok(TokenClass::Text) | Ok(TokenClass::Special(_))
        ) && id != PAD
    }
}

/// Builds the joint vocabulary. Equal inputs always give equal layouts.
pub fn build_vocab(
    n_streams: usize,
    text_size: usize,
    semantic_size: usize,
    acoustic_size: usize,
) -> Result<JointVocab> {
    JointVocab::new(n_streams, text_size, semantic_size, acoustic_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_layout() -> JointVocab {
        build_vocab(9, 256, 64, 32).unwrap()
    }

    #[test]
    fn nine_stream_total_size() {
        assert_eq!(paper_layout().total_size(), 11 + 256 + 64 + 8 * 32);
        assert_eq!(paper_layout().total_size(), 587);
    }

    #[test]
    fn single_stream_has_no_codebooks() {
        let v = build_vocab(1, 10, 1, 1).unwrap();
        assert_eq!(v.n_codebooks(), 0);
        assert_eq!(v.total_size(), 22);
    }

    #[test]
    fn last_codebook_occupies_last_ids() {
        // 11 specials, text 11..15, semantic 15..17, cb1 17..19, cb2 19..21
        let v = build_vocab(3, 4, 2, 2).unwrap();
        assert_eq!(v.total_size(), 21);
        assert_eq!(v.range(TokenClass::Acoustic(2)), 19..21);
        assert_eq!(v.classify(19).unwrap(), TokenClass::Acoustic(2));
        assert_eq!(v.classify(20).unwrap(), TokenClass::Acoustic(2));
        assert_eq!(v.classify(18).unwrap(), TokenClass::Acoustic(1));
    }

    #[test]
    fn rejects_zero_sizes() {
        assert!(build_vocab(0, 1, 1, 1).is_err());
        assert!(build_vocab(3, 0, 1, 1).is_err());
        assert!(build_vocab(3, 1, 0, 1).is_err());
        assert!(build_vocab(3, 1, 1, 0).is_err());
    }

    #[test]
    fn classify_examples() {
        let v = paper_layout();
        assert_eq!(v.classify(0).unwrap(), TokenClass::Special(Special::Pad));
        assert_eq!(v.classify(11).unwrap(), TokenClass::Text);
        assert_eq!(v.classify(11 + 256 + 64).unwrap(), TokenClass::Acoustic(1));
        assert!(v.classify(587).is_err());
    }

    #[test]
    fn map_examples() {
        let v = paper_layout();
        assert_eq!(v.map_token(TokenClass::Text, 0).unwrap(), 11);
        assert_eq!(v.map_token(TokenClass::Semantic, 5).unwrap(), 272);
        assert_eq!(v.inverse(272).unwrap(), (TokenClass::Semantic, 5));
        assert!(v.map_token(TokenClass::Semantic, 64).is_err());
        assert!(v.map_token(TokenClass::Acoustic(9), 0).is_err());
        assert!(v.map_token(TokenClass::Special(Special::Eot), 0).is_err());
    }

    #[test]
    fn specials_are_in_declared_order() {
        let v = paper_layout();
        for (i, s) in Special::ALL.iter().enumerate() {
            assert_eq!(s.id() as usize, i);
            assert_eq!(v.specials[i], s.name());
        }
        assert_eq!(PAD, 0);
    }

    proptest! {
        #[test]
        fn full_round_trip(n in 1usize..10, t in 1usize..40, s in 1usize..20, a in 1usize..20) {
            let v = build_vocab(n, t, s, a).unwrap();
            let mut counts = vec![0usize; v.total_size()];
            for g in 0..v.total_size() as u32 {
                let (class, local) = v.inverse(g).unwrap();
                prop_assert_eq!(v.map_token(class, local).unwrap(), g);
                counts[g as usize] += 1;
            }
            // partition: every id covered by exactly one class range
            let mut covered = vec![0usize; v.total_size()];
            let mut classes: Vec<TokenClass> = Special::ALL.iter().map(|s| TokenClass::Special(*s)).collect();
            classes.push(TokenClass::Text);
            classes.push(TokenClass::Semantic);
            for cb in 1..n { classes.push(TokenClass::Acoustic(cb)); }
            for c in classes {
                for g in v.range(c) { covered[g] += 1; }
            }
            prop_assert!(covered.iter().all(|&c| c == 1));
        }
    }
}
