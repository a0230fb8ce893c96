//! Error rates, speaker matching, perplexity and the task-level evaluators.

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusRecord;
use crate::error::{Error, Result};
use crate::infer::{decode_asr, decode_tts, text_legal_set, DecodeParams};
use crate::model::ModelState;
use crate::sequence::Task;
use crate::tensor::Scalar;
use crate::toycodec::{ids_to_text, ToyCodec};
use crate::vocab::{Special, TokenId};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(S + D + I) / |ref|`.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Eval("empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn speaker_match(decoded: &[Option<usize>], expected: &[usize]) -> Result<f64> {
    if decoded.len() != expected.len() {
        return Err(Error::Eval(format!(
            "{} decoded speakers for {} expected",
            decoded.len(),
            expected.len()
        )));
    }
    if expected.is_empty() {
        return Err(Error::Eval("no speakers to compare".into()));
    }
    let hits = decoded.iter().zip(expected).filter(|(d, e)| **d == Some(**e)).count();
    Ok(hits as f64 / expected.len() as f64)
}

/// `exp(mean CE)` over the tokens after the first of each sequence, with the
/// softmax restricted to text tokens and `eot`.
pub fn perplexity<F: Scalar>(state: &ModelState<F>, texts: &[Vec<TokenId>]) -> Result<f64> {
    let legal = text_legal_set(&state.vocab);
    let v = state.vocab_size();
    let mut total = 0.0;
    let mut count = 0usize;
    for ids in texts {
        let logits = state.text_compat_forward(ids)?;
        for t in 1..ids.len() {
            let row = &logits[(t - 1) * v..t * v];
            if !legal[ids[t] as usize] {
                return Err(Error::Eval(format!("token {} outside the text set", ids[t])));
            }
            let max = row.iter().zip(&legal).filter(|(_, &l)| l).map(|(x, _)| x.to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row
                .iter()
                .zip(&legal)
                .filter(|(_, &l)| l)
                .map(|(x, _)| (x.to_f64().unwrap() - max).exp())
                .sum();
            total += max + sum.ln() - row[ids[t] as usize].to_f64().unwrap();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Eval("empty text corpus".into()));
    }
    let ppl = (total / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::Eval("perplexity is not finite".into()));
    }
    Ok(ppl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub n_items: usize,
    /// Token (character) error rate for ASR, word error rate for TTS.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_match_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    pub truncation_count: usize,
}

/// One decoded item, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoded_speaker: Option<usize>,
    pub truncated: bool,
}

fn need<'a, T>(x: &'a Option<T>, id: &str, what: &str) -> Result<&'a T> {
    x.as_ref().ok_or_else(|| Error::Eval(format!("record {id} has no {what}")))
}

/// Greedy (or `params`) transcription of ASR records, scored by the
/// corpus-level character error rate.
pub fn eval_asr<F: Scalar>(
    state: &ModelState<F>,
    records: &[&CorpusRecord],
    params: &DecodeParams,
) -> Result<(EvalReport, Vec<EvalItem>)> {
    let mut errors = 0usize;
    let mut ref_len = 0usize;
    let mut truncations = 0;
    let mut items = Vec::new();
    for r in records {
        let text = need(&r.text, &r.id, "text")?;
        let speech = r.speech_frames(state.vocab.n_streams)?.ok_or_else(|| Error::Eval(format!("record {} has no speech", r.id)))?;
        let out = decode_asr(state, &speech, params)?;
        errors += edit_distance(text, &out.text);
        ref_len += text.len();
        truncations += usize::from(out.truncated);
        items.push(EvalItem {
            id: r.id.clone(),
            reference: ids_to_text(text),
            hypothesis: ids_to_text(&out.text),
            speaker: r.speaker,
            decoded_speaker: None,
            truncated: out.truncated,
        });
    }
    if ref_len == 0 {
        return Err(Error::Eval("no ASR references".into()));
    }
    Ok((
        EvalReport {
            task: Task::Asr,
            n_items: records.len(),
            wer: Some(errors as f64 / ref_len as f64),
            speaker_match_rate: None,
            perplexity: None,
            truncation_count: truncations,
        },
        items,
    ))
}

/// Synthesizes TTS records, decodes the result with the codec and scores
/// the corpus-level word error rate and the speaker match against the prompt.
pub fn eval_tts<F: Scalar>(
    state: &ModelState<F>,
    codec: &ToyCodec,
    records: &[&CorpusRecord],
    params: &DecodeParams,
) -> Result<(EvalReport, Vec<EvalItem>)> {
    let mut errors = 0usize;
    let mut ref_len = 0usize;
    let mut truncations = 0;
    let mut decoded = Vec::new();
    let mut expected = Vec::new();
    let mut items = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let text = need(&r.text, &r.id, "text")?;
        let prompt = r.prompt_frames(state.vocab.n_streams)?.ok_or_else(|| Error::Eval(format!("record {} has no prompt", r.id)))?;
        let speaker = *need(&r.speaker, &r.id, "speaker")?;
        let p = DecodeParams {
            seed: params.seed.wrapping_add(i as u64),
            ..params.clone()
        };
        let out = decode_tts(state, text, &prompt, &p)?;
        let d = codec.decode_speech(&out.speech);
        let reference = ids_to_text(text);
        errors += edit_distance(&words(&reference), &words(&d.text));
        ref_len += words(&reference).len();
        truncations += usize::from(out.truncated);
        decoded.push(d.speaker);
        expected.push(speaker);
        items.push(EvalItem {
            id: r.id.clone(),
            reference,
            hypothesis: d.text,
            speaker: Some(speaker),
            decoded_speaker: d.speaker,
            truncated: out.truncated,
        });
    }
    if ref_len == 0 {
        return Err(Error::Eval("no TTS references".into()));
    }
    Ok((
        EvalReport {
            task: Task::Tts,
            n_items: records.len(),
            wer: Some(errors as f64 / ref_len as f64),
            speaker_match_rate: Some(speaker_match(&decoded, &expected)?),
            perplexity: None,
            truncation_count: truncations,
        },
        items,
    ))
}

/// Perplexity of TextLM records laid out as `[task_textlm] text [eot]`.
pub fn eval_textlm<F: Scalar>(state: &ModelState<F>, records: &[&CorpusRecord]) -> Result<EvalReport> {
    let vocab = &state.vocab;
    let texts = records
        .iter()
        .map(|r| {
            let text = need(&r.text, &r.id, "text")?;
            let mut ids = vec![Special::TaskTextLm.id()];
            for &t in text {
                ids.push(vocab.text(t)?);
            }
            ids.push(Special::Eot.id());
            Ok(ids)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        task: Task::TextLm,
        n_items: records.len(),
        wer: None,
        speaker_match_rate: None,
        perplexity: Some(perplexity(state, &texts)?),
        truncation_count: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::vocab::build_vocab;
    use proptest::prelude::*;

    #[test]
    fn error_rate_examples() {
        assert!((wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&["a", "b"], &["a", "b"]).unwrap(), 0.0);
        assert_eq!(wer(&["a"], &["a", "b", "c"]).unwrap(), 2.0);
        assert!(wer::<&str>(&[], &["a"]).is_err());
    }

    #[test]
    fn speaker_match_examples() {
        assert_eq!(speaker_match(&[Some(1), Some(2)], &[1, 2]).unwrap(), 1.0);
        assert_eq!(speaker_match(&[Some(0), None], &[1, 2]).unwrap(), 0.0);
        let mut d = vec![Some(3); 20];
        d[7] = Some(1);
        assert_eq!(speaker_match(&d, &[3; 20]).unwrap(), 0.95);
        assert!(speaker_match(&[Some(1)], &[1, 2]).is_err());
    }

    #[test]
    fn uniform_model_has_legal_set_perplexity() {
        let vocab = build_vocab(3, 27, 8, 8).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            context_len: 32,
            ..ModelConfig::default()
        };
        let mut m = init_model::<f64>(&cfg, &vocab, 0, None).unwrap();
        m.params.out_proj.data.iter_mut().for_each(|x| *x = 0.0);
        let texts = vec![vec![6, 12, 20, 3], vec![6, 30, 3]];
        let ppl = perplexity(&m, &texts).unwrap();
        assert!((ppl - 28.0).abs() < 1e-9);
        assert!(perplexity(&m, &[vec![6]]).is_err());
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in proptest::collection::vec(0u8..4, 0..12),
                                b in proptest::collection::vec(0u8..4, 0..12),
                                c in proptest::collection::vec(0u8..4, 0..12)) {
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            let relabel = |x: &Vec<u8>| x.iter().map(|v| (v + 1) % 4).collect::<Vec<_>>();
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&relabel(&a), &relabel(&b)));
        }
    }
}
