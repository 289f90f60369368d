use thiserror::Error;

pub type Result<T, E = DapdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DapdError {
    #[error("no attention layers")]
    NoAttentionLayers,
    #[error("no masked positions")]
    NoMaskedPositions,
    #[error("attention layer {layer} head {head} row {row} sums to {sum}, not 1")]
    NotRowStochastic {
        layer: usize,
        head: usize,
        row: usize,
        sum: f64,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed denoiser output: {0}")]
    MalformedOutput(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("zero support: {0}")]
    ZeroSupport(String),
    #[error("AUC undefined: both classes must be present")]
    AucUndefined,
    #[error("edge ratio undefined: {0}")]
    RatioUndefined(&'static str),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
