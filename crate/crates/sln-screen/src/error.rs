use std::path::PathBuf;

use thiserror::Error;

/// Library-wide error type. Validation failures name the offending
/// shape, record, or file; I/O failures keep the path.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeMismatch {
        context: String,
        left: String,
        right: String,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("kernel {kernel}x{kernel_w} does not fit input {input_h}x{input_w} with valid padding")]
    KernelTooLarge {
        kernel: usize,
        kernel_w: usize,
        input_h: usize,
        input_w: usize,
    },

    #[error("pool window {window} exceeds input extent {extent}")]
    WindowTooLarge { window: usize, extent: usize },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("non-finite gradient at coordinate {coord}")]
    NonFiniteGradient { coord: usize },

    #[error("layer {index} ({kind}): {reason}")]
    InvalidLayer {
        index: usize,
        kind: String,
        reason: String,
    },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("{path}: not a checkpoint (bad magic bytes)")]
    NotACheckpoint { path: PathBuf },

    #[error("{path}: unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated checkpoint ({detail})")]
    TruncatedCheckpoint { path: PathBuf, detail: String },

    #[error("{path}: corrupt checkpoint: {detail}")]
    CorruptCheckpoint { path: PathBuf, detail: String },

    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("{path}: malformed image: {reason}")]
    MalformedImage { path: PathBuf, reason: String },

    #[error("{path}: image is {found_w}x{found_h}, expected {want_w}x{want_h}")]
    WrongImageSize {
        path: PathBuf,
        found_w: usize,
        found_h: usize,
        want_w: usize,
        want_h: usize,
    },

    #[error("manifest line {line}: {reason}")]
    ManifestParse { line: usize, reason: String },

    #[error("{kind} record {id}: unknown diagnostic category code {code}")]
    UnknownCategory { kind: String, id: String, code: i64 },

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: String, id: String },

    #[error("{kind} record {id} references missing {missing_kind} {missing_id}")]
    MissingReference {
        kind: String,
        id: String,
        missing_kind: String,
        missing_id: String,
    },

    #[error("slide {id} has {found} patches, expected {expected}")]
    WrongPatchCount {
        id: String,
        found: usize,
        expected: usize,
    },

    #[error("{kind} record {id}: {reason}")]
    InvalidRecord {
        kind: String,
        id: String,
        reason: String,
    },

    #[error(
        "split fractions {requested:?} unachievable at {granularity} granularity; \
         nearest achievable counts are {nearest:?}"
    )]
    UnachievableSplit {
        requested: Vec<f64>,
        granularity: String,
        nearest: Vec<usize>,
    },

    #[error("split fractions sum to {sum}, expected 1")]
    BadFractions { sum: f64 },

    #[error("slide {slide_id} contributes {count} test patches, not a multiple of 5")]
    VoteSetRemainder { slide_id: String, count: usize },

    #[error("majority vote requires exactly 5 votes, got {got}")]
    VoteCount { got: usize },

    #[error("{split} split is empty")]
    EmptySplit { split: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("metric {metric} for {user} is not computable; cannot aggregate")]
    AggregateNotComputable { user: String, metric: String },

    #[error("{path} line {line}: {reason}")]
    CsvParse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unknown config key {key:?}")]
    UnknownConfigKey { key: String },

    #[error("config key {key:?}: invalid value {value:?}: {reason}")]
    InvalidConfigValue {
        key: String,
        value: String,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error to: 2 for I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
