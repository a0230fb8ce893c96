//! The subcommands as library functions. `main` only parses flags, applies
//! overrides to the [`RunConfig`] and dispatches here.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use delaylm::checkpoint::{Checkpoint, MAGIC};
use delaylm::corpus::{Corpus, CorpusHeader, CorpusRecord};
use delaylm::eval::{eval_asr, eval_textlm, eval_tts, EvalItem, EvalReport};
use delaylm::infer::{decode_asr, decode_tts};
use delaylm::model::{init_model, ModelState};
use delaylm::sequence::{BatchSampler, Task, TrainExample};
use delaylm::toycodec::{gen_corpus, CodecSpec, GenConfig, ToyCodec};
use delaylm::train::{grad_check as run_grad_check, train_step, AdamW, GradCheckReport, Phase, TrainLogRecord};
use delaylm::vocab::{build_vocab, JointVocab};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::lock::DirLock;

pub const TRAIN_CORPUS: &str = "train.jsonl";
pub const ANNEAL_CORPUS: &str = "anneal.jsonl";
pub const TEST_CORPUS: &str = "test.jsonl";
pub const LONG_TEST_CORPUS: &str = "test_long.jsonl";
pub const MIXTURE: &str = "mixture.toml";

fn phase_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Pretrain => "pretrain",
        Phase::Anneal => "anneal",
    }
}

pub fn checkpoint_name(phase: Phase) -> String {
    format!("{}.ckpt", phase_name(phase))
}

pub fn log_name(phase: Phase) -> String {
    format!("{}.log", phase_name(phase))
}

fn derive_seed(base: u64, offset: u64, salt: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(offset).wrapping_add(salt << 40)
}

/// Corpus files with upsampling multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixture {
    pub source: Vec<MixtureSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSource {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default = "one")]
    pub multiplier: u32,
}

fn one() -> u32 {
    1
}

impl Mixture {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingFile(format!("{}: {e}", path.display())))?;
        let mut m: Mixture = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if m.source.is_empty() {
            return Err(CliError::Config(format!("{}: no sources", path.display())));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.source {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
        }
        Ok(m)
    }

    pub fn single(path: &Path) -> Self {
        Mixture {
            source: vec![MixtureSource {
                path: path.to_path_buf(),
                multiplier: 1,
            }],
        }
    }
}

fn read_corpus(path: &Path) -> CliResult<Corpus> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.display().to_string()));
    }
    Ok(Corpus::read(path)?)
}

fn check_vocab(path: &Path, found: &JointVocab, expected: &JointVocab) -> CliResult<()> {
    if found != expected {
        return Err(delaylm::Error::Corpus(format!("{}: vocabulary differs from the model's", path.display())).into());
    }
    Ok(())
}

fn median_speech_len(corpus: &Corpus) -> usize {
    let mut lens: Vec<usize> = corpus
        .records
        .iter()
        .filter(|r| r.task == Task::Asr && !r.long_form)
        .filter_map(|r| r.speech.as_ref().map(Vec::len))
        .collect();
    lens.sort_unstable();
    lens.get(lens.len() / 2).copied().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSummary {
    pub files: Vec<(PathBuf, usize)>,
    pub median_speech_len: usize,
    pub long_form_len: usize,
}

/// Writes the training, annealing, test and long-form test corpora plus the
/// annealing mixture manifest into `out_dir`.
pub fn gen_data(cfg: &RunConfig, out_dir: &Path) -> CliResult<DataSummary> {
    std::fs::create_dir_all(out_dir)?;
    let codec = ToyCodec::new(cfg.codec.clone())?;
    let d = &cfg.data;
    let train = gen_corpus(
        &codec,
        &GenConfig {
            seed: derive_seed(cfg.seed, d.train.seed, 1),
            ..d.train.clone()
        },
    )?;
    let median = median_speech_len(&train);
    let long_len = median * d.long_test_factor;
    let splice = |g: &GenConfig| if g.splice_target_len == 0 { long_len } else { g.splice_target_len };
    let anneal = gen_corpus(
        &codec,
        &GenConfig {
            seed: derive_seed(cfg.seed, d.anneal.seed, 2),
            splice_target_len: splice(&d.anneal),
            ..d.anneal.clone()
        },
    )?;
    let test = gen_corpus(
        &codec,
        &GenConfig {
            n_utts: d.test_utts,
            long_form_frac: 0.0,
            seed: derive_seed(cfg.seed, d.train.seed, 3),
            ..d.train.clone()
        },
    )?;
    let long_test = gen_corpus(
        &codec,
        &GenConfig {
            n_utts: d.long_test_utts,
            long_form_frac: 1.0,
            splice_target_len: long_len,
            seed: derive_seed(cfg.seed, d.train.seed, 4),
            ..d.train.clone()
        },
    )?;
    let mut files = Vec::new();
    for (name, c) in [
        (TRAIN_CORPUS, &train),
        (ANNEAL_CORPUS, &anneal),
        (TEST_CORPUS, &test),
        (LONG_TEST_CORPUS, &long_test),
    ] {
        let path = out_dir.join(name);
        c.write(&path)?;
        files.push((path, c.records.len()));
    }
    let mixture = Mixture {
        source: vec![
            MixtureSource {
                path: TRAIN_CORPUS.into(),
                multiplier: 1,
            },
            MixtureSource {
                path: ANNEAL_CORPUS.into(),
                multiplier: d.anneal_multiplier,
            },
        ],
    };
    let path = out_dir.join(MIXTURE);
    std::fs::write(&path, toml::to_string(&mixture).expect("manifest is serializable"))?;
    files.push((path, mixture.source.len()));
    Ok(DataSummary {
        files,
        median_speech_len: median,
        long_form_len: long_len,
    })
}

/// Composes every record of every source, repeated by its multiplier.
pub fn load_examples(cfg: &RunConfig, mixture: &Mixture, vocab: &JointVocab) -> CliResult<Vec<TrainExample>> {
    let policy = cfg.train.weights.policy(vocab.n_streams);
    let mut out = Vec::new();
    for s in &mixture.source {
        let corpus = read_corpus(&s.path)?;
        check_vocab(&s.path, &corpus.header.vocab, vocab)?;
        let mut examples = Vec::with_capacity(corpus.records.len());
        for r in &corpus.records {
            examples.push(r.compose(vocab)?.prepare(r.id.clone(), &policy, vocab)?);
        }
        for _ in 0..s.multiplier {
            out.extend(examples.iter().cloned());
        }
    }
    if out.is_empty() {
        return Err(delaylm::Error::Corpus("training mixture has no records".into()).into());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<TrainLogRecord>,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config: &'a RunConfig,
}

fn run_phase(
    cfg: &RunConfig,
    phase: Phase,
    mut state: ModelState<f32>,
    mut opt: AdamW<f32>,
    examples: &[TrainExample],
    out_dir: &Path,
) -> CliResult<TrainOutcome> {
    let schedule = &cfg.train.schedule;
    let steps = schedule.phase_steps(phase)?;
    let salt = match phase {
        Phase::Pretrain => 0,
        Phase::Anneal => 1,
    };
    let mut sampler = BatchSampler::new(
        examples,
        cfg.model.context_len,
        schedule.batch_frames,
        cfg.data.text_fraction,
        derive_seed(schedule.seed, 0, salt),
    )?;
    let region = cfg.train.region.override_region();
    let log_path = out_dir.join(log_name(phase));
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "{}", serde_json::to_string(&LogHeader { config: cfg }).map_err(delaylm::Error::from)?)?;
    let mut records = Vec::new();
    for step in 1..=steps {
        let batch = sampler.next_batch(examples);
        let rec = train_step(&mut state, &mut opt, examples, &batch.rows, schedule, phase, step, region)?;
        if step % cfg.train.log_every == 0 || step == steps {
            writeln!(log, "{}", serde_json::to_string(&rec).map_err(delaylm::Error::from)?)?;
            log.flush()?;
            log::info!(
                "{} step {step}/{steps} loss {:.4} (text {:.4} sem {:.4} ac {:.4}) acc {:.3} lr {:.3e} |g| {:.3} {} ms",
                phase_name(phase),
                rec.total_loss,
                rec.loss_text,
                rec.loss_semantic,
                rec.loss_acoustic,
                rec.token_acc,
                rec.lr,
                rec.grad_norm,
                rec.wall_ms
            );
        }
        records.push(rec);
        let every = cfg.train.checkpoint_every;
        if every > 0 && step % every == 0 && step != steps {
            let ckpt = Checkpoint {
                state: state.clone(),
                optimizer: Some(opt.clone()),
                step,
                phase,
            };
            ckpt.save(&out_dir.join(format!("{}-{step:07}.ckpt", phase_name(phase))))?;
        }
    }
    let checkpoint = out_dir.join(checkpoint_name(phase));
    Checkpoint {
        state,
        optimizer: Some(opt),
        step: steps,
        phase,
    }
    .save(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        records,
    })
}

/// Pre-training from a fresh initialization, or from `init_ckpt` when given.
pub fn train(cfg: &RunConfig, mixture: &Mixture, init_ckpt: Option<&Path>, out_dir: &Path) -> CliResult<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let _lock = DirLock::acquire(out_dir)?;
    let (state, opt) = match init_ckpt {
        Some(p) => {
            let c = load_checkpoint(p)?;
            let opt = AdamW::new(cfg.train.optimizer, &c.state.params);
            (c.state, opt)
        }
        None => {
            let vocab = cfg.codec.vocab()?;
            let state = init_model::<f32>(&cfg.model, &vocab, cfg.seed, None)?;
            let opt = AdamW::new(cfg.train.optimizer, &state.params);
            (state, opt)
        }
    };
    let examples = load_examples(cfg, mixture, &state.vocab)?;
    log::info!(
        "pre-training {} parameters on {} sequences",
        state.params.num_params(),
        examples.len()
    );
    run_phase(cfg, Phase::Pretrain, state, opt, &examples, out_dir)
}

/// Annealing continues from a checkpoint, keeping its optimizer moments.
pub fn anneal(cfg: &RunConfig, mixture: &Mixture, init_ckpt: &Path, out_dir: &Path) -> CliResult<TrainOutcome> {
    if cfg.train.schedule.anneal.is_none() {
        return Err(CliError::Config("train.schedule.anneal is not set".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let _lock = DirLock::acquire(out_dir)?;
    let c = load_checkpoint(init_ckpt)?;
    let opt = match c.optimizer {
        Some(mut o) => {
            o.config = cfg.train.optimizer;
            o
        }
        None => AdamW::new(cfg.train.optimizer, &c.state.params),
    };
    let examples = load_examples(cfg, mixture, &c.state.vocab)?;
    log::info!("annealing on {} sequences", examples.len());
    run_phase(cfg, Phase::Anneal, c.state, opt, &examples, out_dir)
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.display().to_string()));
    }
    Ok(Checkpoint::load(path)?)
}

fn load_model_and_corpus(ckpt: &Path, corpus: &Path) -> CliResult<(ModelState<f32>, Corpus)> {
    let c = load_checkpoint(ckpt)?;
    let corpus_data = read_corpus(corpus)?;
    check_vocab(corpus, &corpus_data.header.vocab, &c.state.vocab)?;
    Ok((c.state, corpus_data))
}

fn take_items(records: &[CorpusRecord], task: Task, max: usize) -> Vec<&CorpusRecord> {
    let it = records.iter().filter(|r| r.task == task);
    if max == 0 {
        it.collect()
    } else {
        it.take(max).collect()
    }
}

/// Transcribes the ASR records of `corpus`; returns the number written.
pub fn infer_asr(cfg: &RunConfig, ckpt: &Path, corpus: &Path, out: &Path) -> CliResult<usize> {
    let (state, data) = load_model_and_corpus(ckpt, corpus)?;
    let mut records = Vec::new();
    for r in take_items(&data.records, Task::Asr, cfg.eval.max_items) {
        let speech = r
            .speech_frames(state.n_streams())?
            .ok_or_else(|| delaylm::Error::Corpus(format!("record {} has no speech", r.id)))?;
        let o = decode_asr(&state, &speech, &cfg.eval.asr)?;
        if o.truncated {
            log::warn!("{}: transcript truncated", r.id);
        }
        records.push(CorpusRecord {
            id: r.id.clone(),
            task: Task::Asr,
            text: Some(o.text),
            speech: r.speech.clone(),
            prompt: None,
            speaker: r.speaker,
            long_form: r.long_form,
        });
    }
    let n = records.len();
    Corpus {
        header: data.header,
        records,
    }
    .write(out)?;
    Ok(n)
}

/// Synthesizes speech for the TTS records of `corpus`; returns the number written.
pub fn infer_tts(cfg: &RunConfig, ckpt: &Path, corpus: &Path, out: &Path) -> CliResult<usize> {
    let (state, data) = load_model_and_corpus(ckpt, corpus)?;
    let mut records = Vec::new();
    for (i, r) in take_items(&data.records, Task::Tts, cfg.eval.max_items).into_iter().enumerate() {
        let text = r
            .text
            .as_ref()
            .ok_or_else(|| delaylm::Error::Corpus(format!("record {} has no text", r.id)))?;
        let prompt = r
            .prompt_frames(state.n_streams())?
            .ok_or_else(|| delaylm::Error::Corpus(format!("record {} has no prompt", r.id)))?;
        let params = delaylm::infer::DecodeParams {
            seed: cfg.eval.tts.seed.wrapping_add(i as u64),
            ..cfg.eval.tts.clone()
        };
        let o = decode_tts(&state, text, &prompt, &params)?;
        if o.truncated {
            log::warn!("{}: synthesis truncated", r.id);
        }
        records.push(CorpusRecord {
            id: r.id.clone(),
            task: Task::Tts,
            text: Some(text.clone()),
            speech: Some(o.speech.frames().map(|f| f.to_vec()).collect()),
            prompt: r.prompt.clone(),
            speaker: r.speaker,
            long_form: r.long_form,
        });
    }
    let n = records.len();
    Corpus {
        header: data.header,
        records,
    }
    .write(out)?;
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub reports: Vec<EvalReport>,
    /// Perplexity of a freshly initialized model on the same text records.
    pub baseline_perplexity: Option<f64>,
    pub items: Vec<EvalItem>,
}

impl EvalOutput {
    pub fn report(&self, task: Task) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.task == task)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>6} {:>8} {:>9} {:>11} {:>10}", "task", "items", "wer", "speaker", "perplexity", "truncated");
        let opt = |x: Option<f64>, prec: usize| x.map_or("-".to_string(), |v| format!("{v:.prec$}"));
        for r in &self.reports {
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>8} {:>9} {:>11} {:>10}",
                r.task.name(),
                r.n_items,
                opt(r.wer, 4),
                opt(r.speaker_match_rate, 3),
                opt(r.perplexity, 3),
                r.truncation_count
            );
        }
        if let Some(b) = self.baseline_perplexity {
            let _ = writeln!(s, "untrained text perplexity {b:.3}");
        }
        s
    }
}

/// Scores every task present in `corpus`: ASR and TTS by decoding, TextLM by
/// perplexity (with the untrained baseline alongside).
pub fn evaluate(cfg: &RunConfig, ckpt: &Path, corpus: &Path) -> CliResult<EvalOutput> {
    let (state, data) = load_model_and_corpus(ckpt, corpus)?;
    let max = cfg.eval.max_items;
    let mut reports = Vec::new();
    let mut items = Vec::new();
    let asr = take_items(&data.records, Task::Asr, max);
    if !asr.is_empty() {
        let (r, it) = eval_asr(&state, &asr, &cfg.eval.asr)?;
        reports.push(r);
        items.extend(it);
    }
    let tts = take_items(&data.records, Task::Tts, max);
    if !tts.is_empty() {
        let spec: CodecSpec = data
            .header
            .codec
            .clone()
            .ok_or_else(|| delaylm::Error::Corpus("TTS scoring needs the codec in the corpus header".into()))?;
        let codec = ToyCodec::new(spec)?;
        let (r, it) = eval_tts(&state, &codec, &tts, &cfg.eval.tts)?;
        reports.push(r);
        items.extend(it);
    }
    let lm = take_items(&data.records, Task::TextLm, max);
    let mut baseline_perplexity = None;
    if !lm.is_empty() {
        reports.push(eval_textlm(&state, &lm)?);
        let fresh = init_model::<f32>(&state.config, &state.vocab, cfg.seed, None)?;
        baseline_perplexity = eval_textlm(&fresh, &lm)?.perplexity;
    }
    if reports.is_empty() {
        return Err(delaylm::Error::Eval("corpus has no ASR, TTS or TextLM records".into()).into());
    }
    Ok(EvalOutput {
        reports,
        baseline_perplexity,
        items,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(delaylm::Error::from)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Analytic against finite-difference gradients on the configured tiny model.
pub fn grad_check(cfg: &RunConfig) -> CliResult<GradCheckReport> {
    let g = &cfg.grad_check;
    let vocab = build_vocab(g.n_streams, g.text_size, g.semantic_size, g.acoustic_size)?;
    let report = run_grad_check(&g.model, &vocab, cfg.seed)?;
    if report.max_rel_err >= g.tolerance || report.frozen_max_abs != 0.0 {
        return Err(CliError::CheckFailed(format!(
            "max relative error {:.3e} (tolerance {:.1e}), frozen gradient {:.3e}",
            report.max_rel_err, g.tolerance, report.frozen_max_abs
        )));
    }
    Ok(report)
}

/// Human-readable summary of a checkpoint or corpus file.
pub fn inspect(path: &Path) -> CliResult<String> {
    let mut head = [0u8; 8];
    {
        use std::io::Read;
        let mut f = File::open(path).map_err(|e| CliError::MissingFile(format!("{}: {e}", path.display())))?;
        let n = f.read(&mut head)?;
        if n < head.len() {
            head = [0; 8];
        }
    }
    let mut s = String::new();
    if &head == MAGIC {
        let c = Checkpoint::load(path)?;
        let _ = writeln!(s, "checkpoint {}", path.display());
        let _ = writeln!(s, "phase {} step {}", phase_name(c.phase), c.step);
        let _ = writeln!(s, "model {}", serde_json::to_string(&c.state.config).map_err(delaylm::Error::from)?);
        let v = &c.state.vocab;
        let _ = writeln!(
            s,
            "vocab streams {} text {} semantic {} acoustic {} total {}",
            v.n_streams,
            v.text_size,
            v.semantic_size,
            v.acoustic_size,
            v.total_size()
        );
        let _ = writeln!(s, "parameters {}", c.state.params.num_params());
        match &c.optimizer {
            Some(o) => {
                let _ = writeln!(s, "optimizer moments after {} updates", o.t);
            }
            None => {
                let _ = writeln!(s, "no optimizer state");
            }
        }
        for (name, t) in c.state.params.named() {
            let _ = writeln!(s, "  {name} {:?}", t.shape);
        }
    } else {
        let c = read_corpus(path)?;
        let _ = writeln!(s, "corpus {} ({} records)", path.display(), c.records.len());
        let h: &CorpusHeader = &c.header;
        let _ = writeln!(s, "vocab streams {} total {}", h.vocab.n_streams, h.vocab.total_size());
        for task in [Task::TextLm, Task::AudioLm, Task::Asr, Task::Tts] {
            let recs: Vec<_> = c.records.iter().filter(|r| r.task == task).collect();
            if recs.is_empty() {
                continue;
            }
            let frames: usize = recs.iter().filter_map(|r| r.speech.as_ref().map(Vec::len)).sum();
            let long = recs.iter().filter(|r| r.long_form).count();
            let _ = writeln!(
                s,
                "  {:<7} {:>6} records, {:>8} speech frames, {} long-form",
                task.name(),
                recs.len(),
                frames,
                long
            );
        }
        let _ = writeln!(s, "median speech length {}", median_speech_len(&c));
    }
    Ok(s)
}
