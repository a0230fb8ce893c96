//! Incremental decoding with a key/value cache.

use super::ops::{rmsnorm, rope_row, sigmoid};
use super::ModelState;
use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar};
use crate::vocab::TokenId;

/// Keys and values of every layer for the frames fed so far.
#[derive(Debug, Clone)]
pub struct KvCache<F> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

impl<F: Scalar> KvCache<F> {
    pub fn new(m: &ModelState<F>) -> Self {
        let cap = m.config.context_len * m.config.d_model;
        KvCache {
            keys: (0..m.config.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..m.config.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            len: 0,
        }
    }

    /// Frames fed so far; also the position of the next frame.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<F: Scalar> ModelState<F> {
    /// Feeds one delayed frame and returns the logits `[N, V]` for the next.
    pub fn forward_step(&self, cache: &mut KvCache<F>, frame: &[TokenId]) -> Result<Vec<F>> {
        let cfg = &self.config;
        let p = &self.params;
        if frame.len() != self.n_streams() {
            return Err(Error::Shape(format!(
                "frame has {} tokens, model has {} streams",
                frame.len(),
                self.n_streams()
            )));
        }
        if cache.len >= cfg.context_len {
            return Err(Error::ContextOverflow {
                len: cache.len + 1,
                context_len: cfg.context_len,
            });
        }
        let (d, nh, ff) = (cfg.d_model, cfg.n_heads, cfg.d_ff);
        let dh = cfg.head_dim();
        let eps = F::from_f64c(cfg.norm_eps);
        let scale = F::from_f64c(1.0 / (dh as f64).sqrt());
        let pos = cache.len;
        let mut x = self.embed_frame(frame)?;

        for (li, lp) in p.layers.iter().enumerate() {
            let mut h = vec![F::zero(); d];
            rmsnorm(&x, &lp.attn_norm.data, eps, &mut h);
            let mut q = vec![F::zero(); d];
            let mut k = vec![F::zero(); d];
            let mut v = vec![F::zero(); d];
            matmul(&h, &lp.wq.data, &mut q, 1, d, d, false);
            matmul(&h, &lp.wk.data, &mut k, 1, d, d, false);
            matmul(&h, &lp.wv.data, &mut v, 1, d, d, false);
            rope_row(&mut q, &self.rope, pos, false);
            rope_row(&mut k, &self.rope, pos, false);
            cache.keys[li].extend_from_slice(&k);
            cache.values[li].extend_from_slice(&v);
            let keys = &cache.keys[li];
            let values = &cache.values[li];

            let mut attn = vec![F::zero(); d];
            let mut w = vec![F::zero(); pos + 1];
            for head in 0..nh {
                let qh = &q[head * dh..(head + 1) * dh];
                for (j, wj) in w.iter_mut().enumerate() {
                    let kj = &keys[j * d + head * dh..j * d + (head + 1) * dh];
                    *wj = qh.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                }
                let max = w.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for wj in w.iter_mut() {
                    *wj = (*wj - max).exp();
                    sum += *wj;
                }
                let out = &mut attn[head * dh..(head + 1) * dh];
                for (j, &wj) in w.iter().enumerate() {
                    let vj = &values[j * d + head * dh..j * d + (head + 1) * dh];
                    for (o, &b) in out.iter_mut().zip(vj) {
                        *o += wj / sum * b;
                    }
                }
            }
            matmul(&attn, &lp.wo.data, &mut x, 1, d, d, true);

            let mut h2 = vec![F::zero(); d];
            rmsnorm(&x, &lp.ffn_norm.data, eps, &mut h2);
            let mut gate = vec![F::zero(); ff];
            let mut up = vec![F::zero(); ff];
            matmul(&h2, &lp.w_gate.data, &mut gate, 1, d, ff, false);
            matmul(&h2, &lp.w_up.data, &mut up, 1, d, ff, false);
            let act: Vec<F> = gate.iter().zip(&up).map(|(&g, &u)| g * sigmoid(g) * u).collect();
            matmul(&act, &lp.w_down.data, &mut x, 1, ff, d, true);
        }
        cache.len += 1;

        let ns = self.n_streams();
        let nv = self.vocab_size();
        let mut hf = vec![F::zero(); d];
        rmsnorm(&x, &p.final_norm.data, eps, &mut hf);
        let mut z = vec![F::zero(); ns * d];
        for s in 0..ns {
            for i in 0..d {
                z[s * d + i] = hf[i] + p.level_bias.data[s * d + i];
            }
        }
        let mut logits = vec![F::zero(); ns * nv];
        matmul(&z, &p.out_proj.data, &mut logits, ns, d, nv, false);
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interleave::{DelayedMatrix, Modality};
    use crate::model::{init_model, ModelConfig};
    use crate::tensor::max_rel_diff;
    use crate::vocab::build_vocab;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn incremental_steps_match_full_forward() {
        let vocab = build_vocab(3, 10, 8, 6).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 20,
            context_len: 24,
            ..ModelConfig::default()
        };
        let m = init_model::<f64>(&cfg, &vocab, 3, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let len = 20;
        let ids: Vec<u32> = (0..len * 3).map(|_| rng.random_range(0..vocab.total_size() as u32)).collect();
        let x = DelayedMatrix::from_parts(3, ids.clone(), vec![Modality::Speech; len - 2]).unwrap();
        let full = m.forward_full(&x).unwrap();
        let mut cache = KvCache::new(&m);
        for t in 0..len {
            let step = m.forward_step(&mut cache, &ids[t * 3..(t + 1) * 3]).unwrap();
            let reference: Vec<f64> = (0..3).flat_map(|n| full.get(t, n).to_vec()).collect();
            assert!(max_rel_diff(&step, &reference) < 1e-12);
        }
        assert_eq!(cache.len(), len);
    }

    #[test]
    fn overflowing_the_context_fails() {
        let vocab = build_vocab(2, 4, 4, 4).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            context_len: 3,
            ..ModelConfig::default()
        };
        let m = init_model::<f32>(&cfg, &vocab, 0, None).unwrap();
        let mut cache = KvCache::new(&m);
        for _ in 0..3 {
            m.forward_step(&mut cache, &[11, 0]).unwrap();
        }
        assert!(matches!(m.forward_step(&mut cache, &[11, 0]), Err(Error::ContextOverflow { .. })));
    }
}
