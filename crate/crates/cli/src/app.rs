//! Flag parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{RegionMode, RunConfig};
use crate::error::{exit, CliError, CliResult};
use crate::pipeline::{self, Mixture};

#[derive(Debug, Parser)]
#[command(name = "delaylm", version, about = "Delay-interleaved speech/text language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML); defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed and the batch sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Single training corpus.
    #[arg(long, conflicts_with = "mixture")]
    corpus: Option<PathBuf>,
    /// Manifest of corpora with upsampling multipliers.
    #[arg(long)]
    mixture: Option<PathBuf>,
    #[arg(long)]
    init_ckpt: Option<PathBuf>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    region: Option<RegionMode>,
    /// Number of updates in this phase.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_frames: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    init_ckpt: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate toy-codec corpora and the annealing mixture manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train with warmup-decay and the loss-region switch.
    Train(TrainArgs),
    /// Continue from a checkpoint with the linear-to-zero program.
    Anneal(TrainArgs),
    /// Transcribe the ASR records of a corpus.
    InferAsr(ModelArgs),
    /// Synthesize speech for the TTS records of a corpus.
    InferTts(ModelArgs),
    /// Score a checkpoint on a test corpus.
    Eval(ModelArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize a checkpoint or corpus file.
    Inspect { path: PathBuf },
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.train.schedule.seed = s;
    }
    Ok(cfg)
}

fn echo(cfg: &RunConfig) {
    log::info!("resolved config:\n{}", cfg.to_toml());
}

fn apply_train_overrides(cfg: &mut RunConfig, a: &TrainArgs, anneal: bool) -> CliResult<()> {
    let s = &mut cfg.train.schedule;
    if let Some(r) = a.region {
        cfg.train.region = r;
    }
    if let Some(b) = a.batch_frames {
        s.batch_frames = b;
    }
    if let Some(n) = a.steps {
        if anneal {
            let spec = s
                .anneal
                .as_mut()
                .ok_or_else(|| CliError::Config("train.schedule.anneal is not set".into()))?;
            spec.anneal_steps = n;
        } else {
            s.total_steps = n;
            s.warmup_steps = s.warmup_steps.min(n);
            s.loss_region_switch_step = s.loss_region_switch_step.min(n);
        }
    }
    cfg.validate()
}

fn mixture_of(a: &TrainArgs) -> CliResult<Mixture> {
    match (&a.corpus, &a.mixture) {
        (Some(c), None) => Ok(Mixture::single(c)),
        (None, Some(m)) => Mixture::load(m),
        _ => Err(CliError::Usage("exactly one of --corpus or --mixture is required".into())),
    }
}

fn need_ckpt(p: &Option<PathBuf>, cmd: &str) -> CliResult<PathBuf> {
    p.clone().ok_or_else(|| CliError::Usage(format!("{cmd} requires --init-ckpt")))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = resolve(&common)?;
            echo(&cfg);
            let s = pipeline::gen_data(&cfg, &out)?;
            for (p, n) in &s.files {
                println!("{} ({n})", p.display());
            }
            println!("median speech length {} frames, long-form {} frames", s.median_speech_len, s.long_form_len);
        }
        Command::Train(a) => {
            let mut cfg = resolve(&a.common)?;
            apply_train_overrides(&mut cfg, &a, false)?;
            let mixture = mixture_of(&a)?;
            echo(&cfg);
            let o = pipeline::train(&cfg, &mixture, a.init_ckpt.as_deref(), &a.out)?;
            report_training(&o);
        }
        Command::Anneal(a) => {
            let ckpt = need_ckpt(&a.init_ckpt, "anneal")?;
            let mut cfg = resolve(&a.common)?;
            apply_train_overrides(&mut cfg, &a, true)?;
            let mixture = mixture_of(&a)?;
            echo(&cfg);
            let o = pipeline::anneal(&cfg, &mixture, &ckpt, &a.out)?;
            report_training(&o);
        }
        Command::InferAsr(a) => {
            let (cfg, ckpt) = model_setup(&a, "infer-asr")?;
            let n = pipeline::infer_asr(&cfg, &ckpt, &a.corpus, &need_out(&a)?)?;
            println!("{n} transcripts");
        }
        Command::InferTts(a) => {
            let (cfg, ckpt) = model_setup(&a, "infer-tts")?;
            let n = pipeline::infer_tts(&cfg, &ckpt, &a.corpus, &need_out(&a)?)?;
            println!("{n} syntheses");
        }
        Command::Eval(a) => {
            let (cfg, ckpt) = model_setup(&a, "eval")?;
            let o = pipeline::evaluate(&cfg, &ckpt, &a.corpus)?;
            if let Some(out) = &a.out {
                pipeline::write_json(&o, out)?;
            }
            print!("{}", o.table());
        }
        Command::GradCheck { common } => {
            let cfg = resolve(&common)?;
            echo(&cfg);
            let r = pipeline::grad_check(&cfg)?;
            for g in &r.groups {
                println!("{:<24} rel_err {:.3e}", g.name, g.rel_err);
            }
            println!("max rel_err {:.3e}, frozen gradient {:.1e}", r.max_rel_err, r.frozen_max_abs);
        }
        Command::Inspect { path } => {
            print!("{}", pipeline::inspect(&path)?);
        }
    }
    Ok(())
}

fn need_out(a: &ModelArgs) -> CliResult<PathBuf> {
    a.out.clone().ok_or_else(|| CliError::Usage("inference requires --out".into()))
}

fn model_setup(a: &ModelArgs, cmd: &str) -> CliResult<(RunConfig, PathBuf)> {
    let ckpt = need_ckpt(&a.init_ckpt, cmd)?;
    let cfg = resolve(&a.common)?;
    echo(&cfg);
    Ok((cfg, ckpt))
}

fn report_training(o: &pipeline::TrainOutcome) {
    if let Some(last) = o.records.last() {
        println!("step {} loss {:.4} acc {:.3}", last.step, last.total_loss, last.token_acc);
    }
    println!("checkpoint {}", o.checkpoint.display());
    println!("log {}", o.log.display());
}

fn first_line(s: &str) -> &str {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or(s).trim()
}

/// Runs one command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        exit::USAGE
                    } else {
                        exit::OK
                    }
                }
                _ => {
                    eprintln!("delaylm: {}", first_line(&e.to_string()));
                    exit::USAGE
                }
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("delaylm: {}", first_line(&e.to_string()));
            e.exit_code()
        }
    }
}
