use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub k: usize,
    pub temperature: f64,
    /// Output frames (ASR: text tokens, TTS: speech frames) before giving up.
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            mode: DecodeMode::TopK,
            k: 30,
            temperature: 0.7,
            max_frames: 512,
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn greedy(max_frames: usize) -> Self {
        DecodeParams {
            mode: DecodeMode::Greedy,
            max_frames,
            ..DecodeParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == DecodeMode::TopK && (self.k == 0 || self.temperature.is_nan() || self.temperature <= 0.0) {
            return Err(Error::Config("top-k sampling needs k >= 1 and temperature > 0".into()));
        }
        Ok(())
    }
}

/// Highest legal logit; ties go to the lowest id.
pub fn argmax_legal<F: Scalar>(logits: &[F], legal: &[bool]) -> Result<TokenId> {
    let mut best: Option<(usize, F)> = None;
    for (i, (&x, &ok)) in logits.iter().zip(legal).enumerate() {
        if ok && best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i as TokenId).ok_or(Error::EmptyLegalSet)
}

/// Samples from the softmax of `logits / temperature` restricted to the `k`
/// highest legal entries.
pub fn sample_topk<F: Scalar, R: Rng>(
    logits: &[F],
    legal: &[bool],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<TokenId> {
    if k == 0 || temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config("top-k sampling needs k >= 1 and temperature > 0".into()));
    }
    let mut cands: Vec<(usize, f64)> = logits
        .iter()
        .zip(legal)
        .enumerate()
        .filter(|(_, (_, &ok))| ok)
        .map(|(i, (x, _))| (i, x.to_f64().unwrap()))
        .collect();
    if cands.is_empty() {
        return Err(Error::EmptyLegalSet);
    }
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.truncate(k);
    let top = cands[0].1;
    let weights: Vec<f64> = cands.iter().map(|&(_, x)| ((x - top) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&(i, _), w) in cands.iter().zip(&weights) {
        if u < *w {
            return Ok(i as TokenId);
        }
        u -= w;
    }
    Ok(cands[0].0 as TokenId)
}

/// Picks one token according to `params`.
pub fn choose<F: Scalar, R: Rng>(logits: &[F], legal: &[bool], params: &DecodeParams, rng: &mut R) -> Result<TokenId> {
    match params.mode {
        DecodeMode::Greedy => argmax_legal(logits, legal),
        DecodeMode::TopK => sample_topk(logits, legal, params.k, params.temperature, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top1_is_legal_argmax() {
        let logits = [0.1f32, 3.0, 2.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_topk(&logits, &[true; 4], 1, 0.7, &mut rng).unwrap(), 1);
        let legal = [true, false, true, true];
        for _ in 0..50 {
            assert_eq!(sample_topk(&logits, &legal, 1, 2.0, &mut rng).unwrap(), 2);
            assert_ne!(sample_topk(&logits, &legal, 3, 5.0, &mut rng).unwrap(), 1);
        }
        assert_eq!(argmax_legal(&logits, &legal).unwrap(), 2);
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let logits = [0.5f64, 0.51, 0.49];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            assert_eq!(sample_topk(&logits, &[true; 3], 3, 1e-6, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn empty_legal_set_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_topk(&[1.0f32, 2.0], &[false, false], 2, 1.0, &mut rng),
            Err(Error::EmptyLegalSet)
        ));
    }

    #[test]
    fn equal_logits_sample_uniformly_among_k() {
        // chi-square goodness of fit, 3 degrees of freedom, 0.1% critical value 16.27
        let logits = [0.0f32; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_topk(&logits, &[true; 10], 4, 0.7, &mut rng).unwrap() as usize] += 1;
        }
        assert!(counts[4..].iter().all(|&c| c == 0));
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts[..4].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 16.27, "chi2 {chi2}");
    }

    #[test]
    fn sampling_is_seeded() {
        let logits = [0.3f32, 0.1, 0.9, 0.5, 0.2];
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_topk(&logits, &[true; 5], 3, 1.0, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
    }
}
