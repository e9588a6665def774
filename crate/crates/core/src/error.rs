use thiserror::Error;

#[derive(Debug, Error)]
pub enum NitError {
    #[error("{axis} = {size} is not divisible by {factor}")]
    NotDivisible {
        axis: &'static str,
        size: usize,
        factor: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("instance {index} has {tokens} tokens, exceeding the pack budget of {budget}")]
    OverBudget {
        index: usize,
        tokens: usize,
        budget: usize,
    },

    #[error("cumulative sequence length exceeds i32::MAX")]
    SeqLenOverflow,

    #[error("invalid packed layout: {0}")]
    Layout(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NitError> = std::result::Result<T, E>;
