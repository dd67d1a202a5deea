use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// All failure modes of the engine, the network builders and the training
/// loop. Variants carry enough structure for callers to name the offending
/// dimension or parameter in diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: data length {got} does not match shape {shape} ({expected} elements)")]
    DataLength {
        op: &'static str,
        shape: String,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {dimension} mismatch: expected {expected}, got {got}")]
    DimMismatch {
        op: &'static str,
        dimension: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: operand shapes {lhs} and {rhs} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error(
        "conv2d: output {dimension} would be {size} for input {input} (kernel {kernel}, \
         stride {stride}, padding {padding}, dilation {dilation}); must be >= 1"
    )]
    EmptyConvOutput {
        dimension: &'static str,
        size: i64,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    },

    #[error("{op}: invalid configuration: {reason}")]
    InvalidConfig { op: &'static str, reason: String },

    #[error("backward: loss must be a scalar (1x1x1x1), got {shape}")]
    NonScalarLoss { shape: String },

    #[error("backward: gradient tape already consumed; double backward is unsupported")]
    DoubleBackward,

    #[error("{op}: produced a non-finite value (NaN or Inf)")]
    NonFinite { op: &'static str },

    #[error("adam: no gradient for parameter '{name}'")]
    MissingGradient { name: String },

    #[error("parameter store: unknown parameter '{name}'")]
    UnknownParameter { name: String },

    #[error("mask: value {value} at index {index} is not binary")]
    NonBinaryMask { value: f64, index: usize },

    #[error("training aborted: non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: u32, step: u64 },

    #[error("training: {reason}")]
    Train { reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Checkpoint decode failures, each mapped to a distinct user-facing message.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported version {got} (reader supports up to {supported})")]
    UnsupportedVersion { got: u32, supported: u32 },
    #[error("corrupt (checksum mismatch)")]
    ChecksumMismatch,
    #[error("corrupt (truncated or malformed at {section})")]
    Malformed { section: &'static str },
    #[error("incompatible with requested config (digest {stored:#018x} != {requested:#018x})")]
    ConfigDigestMismatch { stored: u64, requested: u64 },
    #[error("stored element type does not match the requested one")]
    DTypeMismatch,
    #[error("invalid config text: {reason}")]
    BadConfig { reason: String },
}
