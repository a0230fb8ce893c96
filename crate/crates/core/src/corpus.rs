//! Corpus files: JSON lines, a header object followed by one record per line.
//!
//! ```text
//! {"format":"delaylm-corpus","version":1,"vocab":{...},"codec":{...}}
//! {"id":"u000000-asr","task":"asr","text":[..],"speech":[[..],..],"speaker":2}
//! ```
//!
//! `text` holds local text ids; `speech` and `prompt` hold frames of global
//! token ids.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::{FrameMatrix, Modality};
use crate::sequence::{compose, ComposeParts, Task, TaskSequence};
use crate::toycodec::CodecSpec;
use crate::vocab::JointVocab;

pub const CORPUS_FORMAT: &str = "delaylm-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub vocab: JointVocab,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codec: Option<CodecSpec>,
}

impl CorpusHeader {
    pub fn new(vocab: JointVocab, codec: Option<CodecSpec>) -> Self {
        CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            vocab,
            codec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speech: Option<Vec<Vec<u32>>>,
    /// Speaker prompt of a TTS record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<Vec<Vec<u32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub long_form: bool,
}

fn to_frames(frames: &[Vec<u32>], n_streams: usize) -> Result<FrameMatrix> {
    let mut x = FrameMatrix::new(n_streams);
    for f in frames {
        if f.len() != n_streams {
            return Err(Error::Corpus(format!("speech frame has {} tokens, expected {n_streams}", f.len())));
        }
        x.push(f, Modality::Speech);
    }
    Ok(x)
}

impl CorpusRecord {
    pub fn speech_frames(&self, n_streams: usize) -> Result<Option<FrameMatrix>> {
        self.speech.as_deref().map(|s| to_frames(s, n_streams)).transpose()
    }

    pub fn prompt_frames(&self, n_streams: usize) -> Result<Option<FrameMatrix>> {
        self.prompt.as_deref().map(|s| to_frames(s, n_streams)).transpose()
    }

    pub fn compose(&self, vocab: &JointVocab) -> Result<TaskSequence> {
        let speech = self.speech_frames(vocab.n_streams)?;
        let prompt = self.prompt_frames(vocab.n_streams)?;
        compose(
            vocab,
            self.task,
            ComposeParts {
                text: self.text.as_deref(),
                speech: speech.as_ref(),
                prompt: prompt.as_ref(),
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub records: Vec<CorpusRecord>,
}

impl Corpus {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Corpus> {
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| Error::Corpus("empty corpus file".into()))??;
        let header: CorpusHeader = serde_json::from_str(&first)
            .map_err(|e| Error::Corpus(format!("bad header line: {e}")))?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(Error::Corpus(format!(
                "unsupported corpus format {} v{}",
                header.format, header.version
            )));
        }
        header.vocab.validate()?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: CorpusRecord =
                serde_json::from_str(&line).map_err(|e| Error::Corpus(format!("line {}: {e}", i + 2)))?;
            records.push(r);
        }
        Ok(Corpus { header, records })
    }

    pub fn read(path: &Path) -> Result<Corpus> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Corpus(format!("cannot open {}: {e}", path.display())))?;
        Self::parse(std::io::BufReader::new(f))
    }
}
