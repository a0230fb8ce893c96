//! Central finite-difference check of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{batch_gradients, batch_loss};
use crate::error::Result;
use crate::interleave::{FrameMatrix, Modality};
use crate::model::{init_model, ModelConfig};
use crate::sequence::{compose, pack_rows, ComposeParts, LossRegion, Task, TrainExample, WeightPolicy};
use crate::vocab::{JointVocab, PAD};

const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    /// `max |analytic - numeric| / max |numeric|` over the group.
    pub rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude on frozen entries (pad row, first level bias).
    pub frozen_max_abs: f64,
    pub n_params: usize,
}

fn random_speech(vocab: &JointVocab, len: usize, rng: &mut ChaCha8Rng) -> FrameMatrix {
    let mut x = FrameMatrix::new(vocab.n_streams);
    for _ in 0..len {
        let mut f = vec![vocab.semantic(rng.random_range(0..vocab.semantic_size as u32)).unwrap()];
        for cb in 1..vocab.n_streams {
            f.push(vocab.acoustic(cb, rng.random_range(0..vocab.acoustic_size as u32)).unwrap());
        }
        x.push(&f, Modality::Speech);
    }
    x
}

fn random_examples(vocab: &JointVocab, rng: &mut ChaCha8Rng) -> Result<Vec<TrainExample>> {
    let policy = WeightPolicy::default_for(vocab.n_streams);
    let text: Vec<u32> = (0..3).map(|_| rng.random_range(0..vocab.text_size as u32)).collect();
    let speech = random_speech(vocab, 3, rng);
    let prompt = random_speech(vocab, 2, rng);
    let parts = [
        (Task::Asr, ComposeParts { text: Some(&text), speech: Some(&speech), prompt: None }),
        (Task::Tts, ComposeParts { text: Some(&text), speech: Some(&speech), prompt: Some(&prompt) }),
        (Task::TextLm, ComposeParts { text: Some(&text), speech: None, prompt: None }),
    ];
    parts
        .into_iter()
        .map(|(task, p)| compose(vocab, task, p)?.prepare(task.name(), &policy, vocab))
        .collect()
}

/// Compares analytic gradients of the whole-region training loss with
/// central differences on a randomly initialized model in `f64`.
pub fn grad_check(config: &ModelConfig, vocab: &JointVocab, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = init_model::<f64>(config, vocab, seed, None)?;
    let jitter = Normal::new(0.0, 0.3).expect("finite std");
    for t in [&mut state.params.final_norm, &mut state.params.level_bias] {
        t.data.iter_mut().for_each(|x| *x += jitter.sample(&mut rng));
    }
    for l in state.params.layers.iter_mut() {
        for t in [&mut l.attn_norm, &mut l.ffn_norm] {
            t.data.iter_mut().for_each(|x| *x += jitter.sample(&mut rng));
        }
    }
    state.params.zero_frozen();

    let examples = random_examples(vocab, &mut rng)?;
    let order: Vec<usize> = (0..examples.len()).collect();
    let total_len: usize = examples.iter().map(|e| e.len()).sum();
    let rows = pack_rows(&examples, &order, total_len.min(config.context_len))?;
    let region = LossRegion::Whole;
    let (_, grads) = batch_gradients(&state, &examples, &rows, region)?;
    let loss = |s: &crate::model::ModelState<f64>| batch_loss(s, &examples, &rows, region).report().map(|r| r.loss);

    let d = config.d_model;
    let names: Vec<String> = state.params.named().into_iter().map(|(n, _)| n).collect();
    let frozen = |name: &str, i: usize| match name {
        "embedding" => i / d == PAD as usize,
        "level_bias" => i < d,
        _ => false,
    };
    let mut groups = Vec::new();
    let mut frozen_max_abs = 0f64;
    for (gi, name) in names.iter().enumerate() {
        let analytic = grads.tensors()[gi].data.clone();
        let mut max_diff = 0f64;
        let mut max_num = 0f64;
        for (i, &a) in analytic.iter().enumerate() {
            if frozen(name, i) {
                frozen_max_abs = frozen_max_abs.max(a.abs());
                continue;
            }
            let orig = state.params.tensors()[gi].data[i];
            state.params.tensors_mut()[gi].data[i] = orig + FD_STEP;
            let plus = loss(&state)?;
            state.params.tensors_mut()[gi].data[i] = orig - FD_STEP;
            let minus = loss(&state)?;
            state.params.tensors_mut()[gi].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_diff = max_diff.max((a - numeric).abs());
            max_num = max_num.max(numeric.abs());
        }
        let max_abs_grad = analytic.iter().fold(0f64, |m, x| m.max(x.abs()));
        let rel_err = if max_diff == 0.0 { 0.0 } else { max_diff / max_num.max(1e-12) };
        groups.push(GroupError {
            name: name.clone(),
            rel_err,
            max_abs_grad,
        });
    }
    let max_rel_err = groups.iter().fold(0f64, |m, g| m.max(g.rel_err));
    Ok(GradCheckReport {
        groups,
        max_rel_err,
        frozen_max_abs,
        n_params: state.params.num_params(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocab;

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let vocab = build_vocab(3, 5, 4, 4).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            context_len: 64,
            init_std: 0.3,
            ..ModelConfig::default()
        };
        let report = grad_check(&cfg, &vocab, 3).unwrap();
        assert!(report.n_params <= 10_000);
        assert!(report.max_rel_err < 1e-3, "{:#?}", report.groups);
        assert_eq!(report.frozen_max_abs, 0.0);
        assert!(report.groups.iter().all(|g| g.max_abs_grad > 0.0));
    }
}
