//! Multi-stream decoder-only transformer.
//!
//! * input: the embeddings of all `N` tokens of a delayed frame are summed;
//! * body: pre-norm causal blocks (RMSNorm, rotary self-attention, SwiGLU);
//! * output: for stream `n` the final hidden state plus a learned level bias
//!   `b_n` goes through one shared projection to the joint vocabulary.
//!
//! The pad embedding row and `b_1` are pinned to zero, so a text-only
//! sequence behaves exactly like a single-stream language model.

mod cache;
mod forward;
pub(crate) mod ops;
pub mod reference;

pub use cache::KvCache;
pub use forward::{backward_row, forward_row, RowTrace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::DelayedMatrix;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{JointVocab, TokenClass, TokenId, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Std of the normal initializer for embeddings and projections.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            context_len: 512,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return fail("model dimensions must be >= 1".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!("head dim {} must be even for rotary encoding", self.head_dim()));
        }
        if self.context_len < 2 {
            return fail("context_len must be >= 2".into());
        }
        if !(self.rope_base > 1.0 && self.norm_eps > 0.0 && self.init_std > 0.0) {
            return fail("rope_base > 1, norm_eps > 0 and init_std > 0 required".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub ffn_norm: Tensor<F>,
    pub w_gate: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
}

/// All trainable tensors. Projections are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    /// `[V, d]`; row 0 (pad) is always zero.
    pub embedding: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Tensor<F>,
    /// `[N, d]`; row 0 is always zero.
    pub level_bias: Tensor<F>,
    /// `[d, V]`, untied from the embedding.
    pub out_proj: Tensor<F>,
}

const LAYER_TENSORS: [&str; 9] = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down"];

impl<F: Scalar> Params<F> {
    pub fn zeros(cfg: &ModelConfig, vocab: &JointVocab) -> Self {
        let (d, f, v, n) = (cfg.d_model, cfg.d_ff, vocab.total_size(), vocab.n_streams);
        Params {
            embedding: Tensor::zeros(&[v, d]),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    attn_norm: Tensor::zeros(&[d]),
                    wq: Tensor::zeros(&[d, d]),
                    wk: Tensor::zeros(&[d, d]),
                    wv: Tensor::zeros(&[d, d]),
                    wo: Tensor::zeros(&[d, d]),
                    ffn_norm: Tensor::zeros(&[d]),
                    w_gate: Tensor::zeros(&[d, f]),
                    w_up: Tensor::zeros(&[d, f]),
                    w_down: Tensor::zeros(&[f, d]),
                })
                .collect(),
            final_norm: Tensor::zeros(&[d]),
            level_bias: Tensor::zeros(&[n, d]),
            out_proj: Tensor::zeros(&[d, v]),
        }
    }

    /// Tensors in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            let ts = [&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_gate, &l.w_up, &l.w_down];
            for (name, t) in LAYER_TENSORS.iter().zip(ts) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("level_bias".into(), &self.level_bias));
        out.push(("out_proj".into(), &self.out_proj));
        out
    }

    /// Same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.embedding];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.level_bias);
        out.push(&mut self.out_proj);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            level_bias: self.level_bias.cast(),
            out_proj: self.out_proj.cast(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    /// Zeroes the entries that are structurally frozen: the pad embedding
    /// row and the stream-1 level bias.
    pub fn zero_frozen(&mut self) {
        let d = self.embedding.shape[1];
        let pad = PAD as usize;
        self.embedding.data[pad * d..(pad + 1) * d].iter_mut().for_each(|x| *x = F::zero());
        self.level_bias.data[..d].iter_mut().for_each(|x| *x = F::zero());
    }
}

/// Whether a named tensor receives decoupled weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with("norm") || name == "level_bias")
}

/// Cosine/sine tables for rotary position encoding, `[context_len, head_dim / 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable<F> {
    pub half: usize,
    pub cos: Vec<F>,
    pub sin: Vec<F>,
}

impl<F: Scalar> RopeTable<F> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let dh = cfg.head_dim();
        let half = dh / 2;
        let mut cos = Vec::with_capacity(cfg.context_len * half);
        let mut sin = Vec::with_capacity(cfg.context_len * half);
        for pos in 0..cfg.context_len {
            for i in 0..half {
                let freq = cfg.rope_base.powf(-(2.0 * i as f64) / dh as f64);
                let angle = pos as f64 * freq;
                cos.push(F::from_f64c(angle.cos()));
                sin.push(F::from_f64c(angle.sin()));
            }
        }
        RopeTable { half, cos, sin }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F> {
    pub config: ModelConfig,
    pub vocab: JointVocab,
    pub params: Params<F>,
    pub rope: RopeTable<F>,
}

/// Per-position, per-stream logits, `[len, N, V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub len: usize,
    pub n_streams: usize,
    pub vocab_size: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Logits<F> {
    pub fn get(&self, t: usize, n: usize) -> &[F] {
        let off = (t * self.n_streams + n) * self.vocab_size;
        &self.data[off..off + self.vocab_size]
    }

    /// Logits of stream 1 only, `[len, V]`.
    pub fn stream(&self, n: usize) -> Vec<F> {
        (0..self.len).flat_map(|t| self.get(t, n).iter().copied()).collect()
    }
}

fn normal_fill<F: Scalar>(t: &mut Tensor<F>, std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("finite std");
    t.data.iter_mut().for_each(|x| *x = F::from_f64c(dist.sample(rng)));
}

/// Empirical per-element standard deviation.
pub fn empirical_std<F: Scalar>(values: &[F]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|x| x.to_f64().unwrap()).sum::<f64>() / n;
    let var = values.iter().map(|x| (x.to_f64().unwrap() - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

impl<F: Scalar> ModelState<F> {
    pub fn from_params(config: ModelConfig, vocab: JointVocab, params: Params<F>) -> Result<Self> {
        config.validate()?;
        let expected = Params::<F>::zeros(&config, &vocab);
        for ((name, want), got) in expected.named().iter().zip(params.tensors()) {
            if want.shape != got.shape {
                return Err(Error::Shape(format!("{name}: expected {:?}, got {:?}", want.shape, got.shape)));
            }
        }
        if expected.layers.len() != params.layers.len() {
            return Err(Error::Shape("layer count".into()));
        }
        let rope = RopeTable::new(&config);
        Ok(ModelState {
            config,
            vocab,
            params,
            rope,
        })
    }

    pub fn cast<G: Scalar>(&self) -> ModelState<G> {
        ModelState {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            rope: RopeTable::new(&self.config),
        }
    }

    pub fn n_streams(&self) -> usize {
        self.vocab.n_streams
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.total_size()
    }

    /// Sum of the embeddings of one delayed frame.
    pub fn embed_frame(&self, frame: &[TokenId]) -> Result<Vec<F>> {
        let d = self.config.d_model;
        let mut h = vec![F::zero(); d];
        for &id in frame {
            self.vocab.classify(id)?;
            if id == PAD {
                continue;
            }
            let row = &self.params.embedding.data[id as usize * d..(id as usize + 1) * d];
            h.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
        Ok(h)
    }

    /// Logits for every delayed position; position `t` predicts frame `t + 1`.
    pub fn forward_full(&self, delayed: &DelayedMatrix) -> Result<Logits<F>> {
        if delayed.n_streams() != self.n_streams() {
            return Err(Error::Shape(format!(
                "delayed matrix has {} streams, model {}",
                delayed.n_streams(),
                self.n_streams()
            )));
        }
        for &id in delayed.tokens() {
            self.vocab.classify(id)?;
        }
        let len = delayed.len();
        if len > self.config.context_len {
            return Err(Error::ContextOverflow {
                len,
                context_len: self.config.context_len,
            });
        }
        let (data, _) = forward_row(self, delayed.tokens(), &[len], false);
        Ok(Logits {
            len,
            n_streams: self.n_streams(),
            vocab_size: self.vocab_size(),
            data,
        })
    }

    /// Stream-1 logits `[len, V]` of a text-only sequence (text and special
    /// ids), computed through the multi-stream path with pads on streams 2..N.
    pub fn text_compat_forward(&self, ids: &[TokenId]) -> Result<Vec<F>> {
        for &id in ids {
            match self.vocab.classify(id)? {
                TokenClass::Text | TokenClass::Special(_) => {}
                c => {
                    return Err(Error::InvalidFrames(format!("text-compatible forward got a {c} token")));
                }
            }
        }
        let len = ids.len();
        if len > self.config.context_len {
            return Err(Error::ContextOverflow {
                len,
                context_len: self.config.context_len,
            });
        }
        let n = self.n_streams();
        let mut rows = vec![PAD; len * n];
        for (t, &id) in ids.iter().enumerate() {
            rows[t * n] = id;
        }
        let (data, _) = forward_row(self, &rows, &[len], false);
        let v = self.vocab_size();
        Ok((0..len).flat_map(|t| data[t * n * v..t * n * v + v].iter().copied()).collect())
    }
}

/// Builds a freshly initialized model.
///
/// Without `text_embed_init` every embedding row is drawn from
/// `N(0, init_std)`. With it, the text rows are copied from the table and the
/// remaining rows are drawn with the table's empirical std. The pad row and
/// the level biases start at zero. Fully determined by `seed`.
pub fn init_model<F: Scalar>(
    config: &ModelConfig,
    vocab: &JointVocab,
    seed: u64,
    text_embed_init: Option<&Tensor<F>>,
) -> Result<ModelState<F>> {
    config.validate()?;
    let d = config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::<F>::zeros(config, vocab);

    let embed_std = match text_embed_init {
        Some(t) => {
            if t.shape != [vocab.text_size, d] {
                return Err(Error::Shape(format!(
                    "text embedding init has shape {:?}, expected [{}, {d}]",
                    t.shape, vocab.text_size
                )));
            }
            empirical_std(&t.data)
        }
        None => config.init_std,
    };
    normal_fill(&mut params.embedding, embed_std, &mut rng);
    if let Some(t) = text_embed_init {
        let off = vocab.text_offset() * d;
        params.embedding.data[off..off + t.numel()].copy_from_slice(&t.data);
    }

    let resid_std = config.init_std / (2.0 * config.n_layers as f64).sqrt();
    for l in params.layers.iter_mut() {
        l.attn_norm = Tensor::filled(&[d], F::one());
        l.ffn_norm = Tensor::filled(&[d], F::one());
        for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.w_gate, &mut l.w_up] {
            normal_fill(w, config.init_std, &mut rng);
        }
        normal_fill(&mut l.wo, resid_std, &mut rng);
        normal_fill(&mut l.w_down, resid_std, &mut rng);
    }
    params.final_norm = Tensor::filled(&[d], F::one());
    normal_fill(&mut params.out_proj, config.init_std, &mut rng);
    params.zero_frozen();
    ModelState::from_params(config.clone(), vocab.clone(), params)
}
