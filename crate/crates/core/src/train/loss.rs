//! Weighted cross-entropy over delayed frames.
//!
//! Delayed position `p` is supervised by the tokens of delayed frame `p + 1`
//! of the same segment, each with its own weight. The loss is
//! `Σ w·CE / Σ w` over all supervised tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::DelayedMatrix;
use crate::model::Logits;
use crate::tensor::Scalar;
use crate::vocab::{JointVocab, TokenClass, TokenId};

/// Loss classes reported separately: text (including specials), semantic, acoustic.
pub const LOSS_CLASSES: [&str; 3] = ["text", "semantic", "acoustic"];

pub fn loss_class(vocab: &JointVocab, id: TokenId) -> usize {
    match vocab.classify(id) {
        Ok(TokenClass::Semantic) => 1,
        Ok(TokenClass::Acoustic(_)) => 2,
        _ => 0,
    }
}

/// Unnormalized sums, additive across rows and batches.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    /// `Σ w·CE` per loss class.
    pub weighted_ce: [f64; 3],
    pub weight_sum: f64,
    pub correct: u64,
    pub count: u64,
}

impl LossStats {
    pub fn merge(&mut self, other: &LossStats) {
        for c in 0..3 {
            self.weighted_ce[c] += other.weighted_ce[c];
        }
        self.weight_sum += other.weight_sum;
        self.correct += other.correct;
        self.count += other.count;
    }

    pub fn report(&self) -> Result<LossReport> {
        if self.weight_sum <= 0.0 {
            return Err(Error::EmptyMask);
        }
        let per_class = self.weighted_ce.map(|x| x / self.weight_sum);
        Ok(LossReport {
            loss: per_class.iter().sum(),
            per_class,
            accuracy: self.correct as f64 / self.count as f64,
        })
    }
}

/// Normalized loss with its per-class decomposition (the three parts sum to
/// `loss`) and the unweighted argmax accuracy over supervised tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub per_class: [f64; 3],
    pub accuracy: f64,
}

/// Sum of the supervised weights of a segment list (the loss normalizer).
pub fn supervised_weight(weights: &[f32], seg_lens: &[usize], n_streams: usize) -> f64 {
    let mut total = 0.0;
    let mut start = 0;
    for &sl in seg_lens {
        // frame 0 of each segment is never a target
        for &w in &weights[(start + 1) * n_streams..(start + sl) * n_streams] {
            total += w as f64;
        }
        start += sl;
    }
    total
}

/// Accumulates the loss of one packed row and, if `dlogits` is given, writes
/// `∂(Σ w·CE / normalizer) / ∂logits` into it.
#[allow(clippy::too_many_arguments)]
pub fn row_loss<F: Scalar>(
    vocab: &JointVocab,
    logits: &[F],
    ids: &[TokenId],
    weights: &[f32],
    seg_lens: &[usize],
    normalizer: f64,
    mut dlogits: Option<&mut [F]>,
) -> LossStats {
    let ns = vocab.n_streams;
    let nv = vocab.total_size();
    let mut stats = LossStats::default();
    if let Some(d) = dlogits.as_deref_mut() {
        d.iter_mut().for_each(|x| *x = F::zero());
    }
    let mut start = 0;
    for &sl in seg_lens {
        for p in start..start + sl - 1 {
            for n in 0..ns {
                let w = weights[(p + 1) * ns + n] as f64;
                if w == 0.0 {
                    continue;
                }
                let target = ids[(p + 1) * ns + n] as usize;
                let off = (p * ns + n) * nv;
                let row = &logits[off..off + nv];
                let mut max = f64::NEG_INFINITY;
                let mut arg = 0;
                for (j, x) in row.iter().enumerate() {
                    let x = x.to_f64().unwrap();
                    if x > max {
                        max = x;
                        arg = j;
                    }
                }
                let sum: f64 = row.iter().map(|x| (x.to_f64().unwrap() - max).exp()).sum();
                let lse = max + sum.ln();
                let ce = lse - row[target].to_f64().unwrap();
                stats.weighted_ce[loss_class(vocab, target as TokenId)] += w * ce;
                stats.weight_sum += w;
                stats.count += 1;
                stats.correct += u64::from(arg == target);
                if let Some(d) = dlogits.as_deref_mut() {
                    let scale = w / normalizer;
                    for (j, (g, x)) in d[off..off + nv].iter_mut().zip(row).enumerate() {
                        let prob = (x.to_f64().unwrap() - lse).exp();
                        let onehot = if j == target { 1.0 } else { 0.0 };
                        *g = F::from_f64c(scale * (prob - onehot));
                    }
                }
            }
        }
        start += sl;
    }
    stats
}

/// Weighted cross-entropy of one delayed sequence. `weights` are the masked
/// per-token weights, delayed together with the tokens.
pub fn weighted_ce_loss<F: Scalar>(
    vocab: &JointVocab,
    logits: &Logits<F>,
    targets: &DelayedMatrix,
    weights: &[f32],
) -> Result<LossReport> {
    if logits.len != targets.len() || weights.len() != targets.tokens().len() {
        return Err(Error::Shape(format!(
            "logits cover {} positions, targets {}, weights {}",
            logits.len,
            targets.len(),
            weights.len()
        )));
    }
    row_loss(vocab, &logits.data, targets.tokens(), weights, &[targets.len()], 1.0, None).report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interleave::Modality;
    use crate::vocab::build_vocab;

    fn setup() -> (JointVocab, DelayedMatrix) {
        let vocab = build_vocab(2, 4, 3, 3).unwrap();
        // frames: [bos-ish special, text], [sem, ac], [text, pad]
        let ids = vec![6, 0, 20, 0, 15, 18, 12, 0];
        let d = DelayedMatrix::from_parts(2, ids, vec![Modality::Special; 3]).unwrap();
        (vocab, d)
    }

    fn uniform_logits(vocab: &JointVocab, len: usize) -> Logits<f64> {
        Logits {
            len,
            n_streams: 2,
            vocab_size: vocab.total_size(),
            data: vec![0.0; len * 2 * vocab.total_size()],
        }
    }

    #[test]
    fn perfect_logits_give_zero_loss_and_full_accuracy() {
        let (vocab, d) = setup();
        let mut logits = uniform_logits(&vocab, 4);
        let v = vocab.total_size();
        for p in 0..3 {
            for n in 0..2 {
                logits.data[(p * 2 + n) * v + d.get(p + 1, n) as usize] = 200.0;
            }
        }
        let w = vec![0.0, 0.0, 1.0, 0.0, 0.5, 0.5, 1.0, 0.0];
        let r = weighted_ce_loss(&vocab, &logits, &d, &w).unwrap();
        assert!(r.loss < 1e-12);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn weighted_mean_of_two_positions() {
        let (vocab, d) = setup();
        let v = vocab.total_size();
        let mut logits = uniform_logits(&vocab, 4);
        logits.data[(2 * 2) * v + 3] = 1.5;
        let a = (v as f64).ln();
        let b = ((v - 1) as f64 + 1.5f64.exp()).ln();
        let w = vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5, 0.0];
        let r = weighted_ce_loss(&vocab, &logits, &d, &w).unwrap();
        assert!((r.loss - (a + 0.5 * b) / 1.5).abs() < 1e-12);
        let parts: f64 = r.per_class.iter().sum();
        assert!((parts - r.loss).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_never_contribute() {
        let (vocab, d) = setup();
        let logits = uniform_logits(&vocab, 4);
        assert!(matches!(weighted_ce_loss(&vocab, &logits, &d, &[0.0; 8]), Err(Error::EmptyMask)));
    }

    #[test]
    fn constant_logits_have_closed_form_gradient() {
        let (vocab, d) = setup();
        let v = vocab.total_size();
        let logits = uniform_logits(&vocab, 4);
        let w = vec![0.0, 0.0, 1.0, 0.0, 0.5, 0.25, 1.0, 0.0];
        let mut g = vec![0.0; logits.data.len()];
        let norm = 2.75;
        row_loss(&vocab, &logits.data, d.tokens(), &w, &[4], norm, Some(&mut g));
        for p in 0..3 {
            for n in 0..2 {
                let wt = w[(p + 1) * 2 + n] / 2.75;
                let target = d.get(p + 1, n) as usize;
                for j in 0..v {
                    let expected = wt as f64 * (1.0 / v as f64 - if j == target { 1.0 } else { 0.0 });
                    assert!((g[(p * 2 + n) * v + j] - expected).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn segments_do_not_supervise_across_boundaries() {
        let (vocab, d) = setup();
        let logits = uniform_logits(&vocab, 4);
        let w = vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let joined = row_loss(&vocab, &logits.data, d.tokens(), &w, &[4], 1.0, None);
        let split = row_loss(&vocab, &logits.data, d.tokens(), &w, &[3, 1], 1.0, None);
        assert_eq!(joined.count, 2);
        assert_eq!(split.count, 1);
        assert_eq!(supervised_weight(&w, &[3, 1], 2), 1.0);
    }
}
