//! Adaptive-moment optimizer with decoupled weight decay and global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use crate::model::{decays, Params};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub m: Params<F>,
    pub v: Params<F>,
    /// Updates applied so far (for bias correction).
    pub t: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, like: &Params<F>) -> Self {
        let mut m = like.clone();
        m.fill_zero();
        AdamW {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut Params<F>, grads: &Params<F>, lr: f64) -> f64 {
        let c = self.config;
        let norm = grads
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|g| g.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (F::from_f64c(c.beta1), F::from_f64c(c.beta2));
        let (one_b1, one_b2) = (F::from_f64c(1.0 - c.beta1), F::from_f64c(1.0 - c.beta2));
        let clip = F::from_f64c(clip);
        let step = F::from_f64c(lr / bc1);
        let inv_bc2 = F::from_f64c(1.0 / bc2);
        let eps = F::from_f64c(c.eps);

        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let gs = grads.tensors();
        let ps = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((name, p), g), m), v) in names.iter().zip(ps).zip(gs).zip(ms).zip(vs) {
            let decay = if decays(name) { F::from_f64c(1.0 - lr * c.weight_decay) } else { F::one() };
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = b1 * m.data[i] + one_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
                let denom = (v.data[i] * inv_bc2).sqrt() + eps;
                p.data[i] = p.data[i] * decay - step * m.data[i] / denom;
            }
        }
        params.zero_frozen();
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::vocab::build_vocab;

    #[test]
    fn first_step_moves_each_parameter_by_lr() {
        let vocab = build_vocab(2, 4, 4, 4).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            context_len: 8,
            ..ModelConfig::default()
        };
        let m = init_model::<f64>(&cfg, &vocab, 0, None).unwrap();
        let mut params = m.params.clone();
        let mut grads = params.clone();
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 1e-3);
        }
        grads.zero_frozen();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &params,
        );
        opt.step(&mut params, &grads, 0.01);
        let before = m.params.out_proj.data[0];
        assert!((params.out_proj.data[0] - (before - 0.01)).abs() < 1e-6);
        assert_eq!(params.level_bias.data[..8], [0.0; 8]);
    }

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        let vocab = build_vocab(2, 4, 4, 4).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            context_len: 8,
            ..ModelConfig::default()
        };
        let m = init_model::<f32>(&cfg, &vocab, 0, None).unwrap();
        let mut params = m.params.clone();
        let grads = params.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        opt.step(&mut params, &grads, 0.0);
        assert_eq!(params, m.params);
    }
}
