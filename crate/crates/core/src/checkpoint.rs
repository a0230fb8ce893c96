//! Binary checkpoint files.
//!
//! ```text
//! magic        8 bytes   "DLMCKPT\0"
//! version      u32 LE    1
//! header_len   u64 LE
//! header       JSON      CheckpointHeader
//! params       f32 LE    every tensor in header order
//! moments      f32 LE    optional: first moments, then second moments, same order
//! ```
//!
//! All integers and floats are little-endian. Loading checks every tensor
//! shape against the model configuration in the header.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, Params};
use crate::train::{AdamW, AdamWConfig, Phase};
use crate::vocab::JointVocab;

pub const MAGIC: &[u8; 8] = b"DLMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub vocab: JointVocab,
    /// Updates completed in `phase`.
    pub step: u64,
    pub phase: Phase,
    pub tensors: Vec<TensorEntry>,
    /// Present when the optimizer moments follow the parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamWConfig,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub step: u64,
    pub phase: Phase,
}

fn write_params(out: &mut Vec<u8>, p: &Params<f32>) {
    for t in p.tensors() {
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn read_params(bytes: &[u8], pos: &mut usize, p: &mut Params<f32>) -> Result<()> {
    for t in p.tensors_mut() {
        let n = t.data.len() * 4;
        let chunk = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::Checkpoint("file truncated inside tensor data".into()))?;
        for (x, b) in t.data.iter_mut().zip(chunk.chunks_exact(4)) {
            *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        *pos += n;
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            model: self.state.config.clone(),
            vocab: self.state.vocab.clone(),
            step: self.step,
            phase: self.phase,
            tensors: self
                .state
                .params
                .named()
                .into_iter()
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape.clone(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry {
                config: o.config,
                t: o.t,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + self.state.params.num_params() * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        write_params(&mut out, &self.state.params);
        if let Some(o) = &self.optimizer {
            write_params(&mut out, &o.m);
            write_params(&mut out, &o.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hbytes = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| Error::Checkpoint("file truncated inside header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(hbytes)?;
        header.vocab.validate()?;
        header.model.validate()?;
        let mut params = Params::<f32>::zeros(&header.model, &header.vocab);
        let expected: Vec<TensorEntry> = params
            .named()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape.clone(),
            })
            .collect();
        if expected != header.tensors {
            return Err(Error::Checkpoint("tensor table does not match the model configuration".into()));
        }
        let mut pos = 20 + hlen;
        read_params(bytes, &mut pos, &mut params)?;
        let optimizer = match &header.optimizer {
            Some(entry) => {
                let mut o = AdamW::new(entry.config, &params);
                read_params(bytes, &mut pos, &mut o.m)?;
                read_params(bytes, &mut pos, &mut o.v)?;
                o.t = entry.t;
                Some(o)
            }
            None => None,
        };
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            state: ModelState::from_params(header.model, header.vocab, params)?,
            optimizer,
            step: header.step,
            phase: header.phase,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::vocab::build_vocab;

    fn sample() -> Checkpoint {
        let vocab = build_vocab(3, 5, 4, 4).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            context_len: 16,
            ..ModelConfig::default()
        };
        let state = init_model::<f32>(&cfg, &vocab, 4, None).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &state.params);
        opt.m.out_proj.data[3] = 0.25;
        opt.t = 7;
        Checkpoint {
            state,
            optimizer: Some(opt),
            step: 7,
            phase: Phase::Pretrain,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        let plain = Checkpoint {
            optimizer: None,
            ..c
        };
        assert_eq!(Checkpoint::from_bytes(&plain.to_bytes().unwrap()).unwrap(), plain);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
