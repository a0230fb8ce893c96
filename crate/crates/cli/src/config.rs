//! Run configuration: one TOML file fully determines a run.

use std::path::Path;

use delaylm::infer::{DecodeMode, DecodeParams};
use delaylm::model::ModelConfig;
use delaylm::sequence::{LossRegion, WeightPolicy};
use delaylm::toycodec::{CodecSpec, GenConfig};
use delaylm::train::{AdamWConfig, TrainSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RegionMode {
    /// Whole sequence before the switch step, target region after.
    Switch,
    Whole,
    Target,
}

impl RegionMode {
    pub fn override_region(self) -> Option<LossRegion> {
        match self {
            RegionMode::Switch => None,
            RegionMode::Whole => Some(LossRegion::Whole),
            RegionMode::Target => Some(LossRegion::Target),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `1 : 1/2 : 1/(N-1)` per token.
    Default,
    /// `1 : 1/2 : 1/(2(N-1))` per token.
    FrameNormalized,
}

impl WeightKind {
    pub fn policy(self, n_streams: usize) -> WeightPolicy {
        match self {
            WeightKind::Default => WeightPolicy::default_for(n_streams),
            WeightKind::FrameNormalized => WeightPolicy::frame_normalized(n_streams),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Pre-training corpus.
    pub train: GenConfig,
    /// High-quality annealing corpus; its long-form share adds spliced records.
    pub anneal: GenConfig,
    /// Upsampling multiplier of the annealing corpus in the annealing mixture.
    pub anneal_multiplier: u32,
    pub test_utts: usize,
    pub long_test_utts: usize,
    /// Long-form test length as a multiple of the median training utterance.
    pub long_test_factor: usize,
    /// Share of delayed frames drawn from text-only sequences.
    pub text_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: GenConfig::default(),
            anneal: GenConfig {
                n_utts: 400,
                long_form_frac: 0.25,
                ..GenConfig::default()
            },
            anneal_multiplier: 1,
            test_utts: 100,
            long_test_utts: 50,
            long_test_factor: 4,
            text_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub optimizer: AdamWConfig,
    pub weights: WeightKind,
    pub region: RegionMode,
    pub log_every: u64,
    /// Intermediate checkpoint period in updates; `0` writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: TrainSchedule::default(),
            optimizer: AdamWConfig::default(),
            weights: WeightKind::Default,
            region: RegionMode::Switch,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub asr: DecodeParams,
    pub tts: DecodeParams,
    /// Items per task taken from the test corpus (`0` = all).
    pub max_items: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            asr: DecodeParams {
                mode: DecodeMode::Greedy,
                ..DecodeParams::default()
            },
            tts: DecodeParams::default(),
            max_items: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub text_size: usize,
    pub semantic_size: usize,
    pub acoustic_size: usize,
    pub n_streams: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                context_len: 64,
                init_std: 0.3,
                ..ModelConfig::default()
            },
            text_size: 5,
            semantic_size: 4,
            acoustic_size: 4,
            n_streams: 3,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub codec: CodecSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub grad_check: GradCheckConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingFile(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.codec.validate()?;
        self.model.validate()?;
        self.train.schedule.validate()?;
        self.data.train.validate()?;
        self.data.anneal.validate()?;
        self.eval.asr.validate()?;
        self.eval.tts.validate()?;
        if self.grad_check.n_streams == 0 {
            return Err(CliError::Config("grad_check.n_streams must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.data.text_fraction) {
            return Err(CliError::Config("data.text_fraction outside [0, 1]".into()));
        }
        if self.train.log_every == 0 {
            return Err(CliError::Config("train.log_every must be >= 1".into()));
        }
        Ok(())
    }
}
