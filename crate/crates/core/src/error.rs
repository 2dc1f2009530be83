use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values produced by {stage}")]
    Numeric { stage: String },
    #[error("digit pool has no images of digit {digit}")]
    DigitPool { digit: u8 },
    #[error("cannot project prototypes of class {class} in channel {channel}: no training samples of that class")]
    Projection { class: usize, channel: usize },
    #[error("training diverged in cycle {cycle}: {detail}")]
    Divergence { cycle: usize, detail: String },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("{0}")]
    OutOfRange(String),
}
