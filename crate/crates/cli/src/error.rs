use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("{0}")]
    Core(#[from] delaylm::Error),

    #[error("lock: {0}")]
    Lock(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit codes, one per error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const MISSING_FILE: i32 = 4;
    pub const DATA: i32 = 5;
    pub const CHECKPOINT: i32 = 6;
    pub const TRAINING: i32 = 7;
    pub const LOCKED: i32 = 8;
    pub const CHECK_FAILED: i32 = 9;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use delaylm::Error as E;
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Config(_) => exit::CONFIG,
            CliError::MissingFile(_) => exit::MISSING_FILE,
            CliError::Lock(_) => exit::LOCKED,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
            CliError::Io(_) => exit::MISSING_FILE,
            CliError::Core(e) => match e {
                E::Config(_) | E::Codec(_) | E::InvalidVocab(_) => exit::CONFIG,
                E::Io(_) => exit::MISSING_FILE,
                E::Checkpoint(_) => exit::CHECKPOINT,
                E::NonFiniteLoss { .. } | E::EmptyMask | E::StepOutOfRange { .. } => exit::TRAINING,
                E::Corpus(_)
                | E::Json(_)
                | E::Compose { .. }
                | E::SequenceTooLong { .. }
                | E::InvalidFrames(_)
                | E::TokenOutOfRange { .. }
                | E::LocalOutOfRange { .. }
                | E::ForcedPadViolation { .. }
                | E::ContextOverflow { .. } => exit::DATA,
                E::Shape(_) | E::EmptyLegalSet | E::Eval(_) => exit::INTERNAL,
            },
        }
    }
}
