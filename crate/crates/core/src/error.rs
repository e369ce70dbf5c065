use alloc::string::String;

/// Errors produced by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot normalize a zero-norm vector")]
    ZeroVector,

    /// NaN/inf or a degenerate intermediate (e.g. a zero-norm key).
    #[error("numeric fault in {0}")]
    NumericFault(&'static str),

    /// A forward pass produced a NaN/inf; names where it happened.
    #[error("numeric fault in {what} at layer {layer}, token {token}")]
    Numeric {
        what: &'static str,
        layer: usize,
        token: u64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty token sequence")]
    EmptySequence,

    #[error("state fingerprint {found:#018x} does not match model {expected:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("state stack covers {have} of {need} layers; resuming requires the full stack")]
    PartialStack { have: usize, need: usize },

    #[error("layer {0} is not present in the state stack")]
    MissingLayer(usize),

    #[error("unknown layer-selection preset '{0}'")]
    UnknownPreset(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
