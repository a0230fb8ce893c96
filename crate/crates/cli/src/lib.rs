//! Driver for the delay-interleaved speech/text language model: data
//! generation, pre-training, annealing, decoding and evaluation.

pub mod app;
pub mod config;
pub mod error;
pub mod lock;
pub mod pipeline;

pub use app::run;
pub use config::RunConfig;
pub use error::{exit, CliError, CliResult};
