use thiserror::Error;

/// Errors produced by tensor, quantization, allocation, and training code.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("empty input")]
    EmptyInput,

    #[error("non-finite input")]
    NonFinite,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A channel whose variance is zero cannot be ranked by kurtosis.
    #[error("degenerate channel")]
    DegenerateChannel,

    /// The bit-allocation search group does not fit into the channel count.
    #[error("group too large")]
    GroupTooLarge,

    #[error("missing timestep {0}")]
    MissingTimestep(usize),

    #[error("timestep {t} out of range [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Fine-tuning guard: the loss exceeded ten times its initial value.
    #[error("training diverged: loss {loss} exceeds 10x initial {initial}")]
    Diverged { loss: f64, initial: f64 },
}

pub type Result<T> = std::result::Result<T, CoreError>;
