use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("config error: {0}")]
    Config(String),
    #[error("codebook fit error: {0}")]
    Fit(String),
    #[error("tokenizer error: {0}")]
    Tokenize(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("attention row {row} has no admissible key")]
    EmptyAttentionRow { row: usize },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("analysis error: {0}")]
    Analysis(String),
}
