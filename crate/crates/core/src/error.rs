use std::path::PathBuf;

/// Errors raised by the detection workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("index {index} out of range for {limit} joint symbols")]
    Range { index: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence too long: {got} pairs exceeds the limit of {max}")]
    Length { got: usize, max: usize },

    #[error("non-finite activation after layer {layer}")]
    Numeric { layer: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("sequence length {len} exceeds the exhaustive-search cap of {cap}")]
    ComplexityGuard { len: usize, cap: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("model assumption violated: {0}")]
    Assumption(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
