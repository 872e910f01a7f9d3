//! Crate-wide error type and the process exit codes derived from it.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single tensor has the wrong shape for an operation.
    #[error("bad shape for {op}: got {shape:?} ({detail})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    /// The time axis is too short for a temporal operation.
    #[error("sequence too short for {op}: length {len}, need at least {min}")]
    SequenceTooShort {
        op: &'static str,
        len: usize,
        min: usize,
    },

    /// More frames than the configured capacity.
    #[error("frame count {frames} exceeds capacity t_max = {t_max}")]
    Capacity { frames: usize, t_max: usize },

    /// Batch statistics cannot be estimated from a single element.
    #[error("degenerate batch statistics: {count} element(s) per channel in train mode")]
    DegenerateStats { count: usize },

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A function handed to the gradient checker returned different values
    /// on two evaluations at the same point.
    #[error("nondeterministic function under gradcheck: {0}")]
    Nondeterministic(String),

    /// The target sequence cannot be aligned to this many frames.
    #[error("infeasible alignment target: {timesteps} timesteps, need at least {min} for this target")]
    Infeasible { timesteps: usize, min: usize },

    /// Exhaustive oracle would enumerate too many paths.
    #[error("oracle capacity exceeded: {paths} paths > limit {limit}")]
    OracleCapacity { paths: f64, limit: f64 },

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset generation failed for a specific sample.
    #[error("generation error for sample {id}: {detail}")]
    Generation { id: String, detail: String },

    /// File shorter than the manifest promised.
    #[error("short read on {path}: expected {expected} bytes, got {actual}")]
    ShortRead {
        path: String,
        expected: u64,
        actual: u64,
    },

    /// Manifest entry failed validation before any file IO.
    #[error("invalid manifest entry {id}: {detail}")]
    ManifestEntry { id: String, detail: String },

    /// Checkpoint file is malformed or inconsistent with the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A verification suite found an error above its threshold.
    #[error("verification failure in {module}: worst case {case} with rel err {rel_err:e}")]
    Verification {
        module: String,
        case: String,
        rel_err: f64,
    },

    /// A loss turned non-finite during training.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
}

impl Error {
    /// Process exit code for the CLI: 0 success, 1 verification/acceptance
    /// failure, 2 usage/config error, 3 IO error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification { .. } | Error::NonFiniteLoss { .. } => 1,
            Error::Config(_) | Error::Contract(_) | Error::Capacity { .. } => 2,
            Error::Io { .. } | Error::ShortRead { .. } | Error::Parse { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
