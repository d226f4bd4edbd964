use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by the stage that raises them; the CLI maps each
/// group onto its own exit code (see [`Error::category`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("I/O error: {0}")]
    Stream(#[from] std::io::Error),

    // container and file formats
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt WAV header: {0}")]
    CorruptHeader(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported {format} version {found} (expected {expected})")]
    VersionMismatch {
        format: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("truncated {0} file")]
    TruncatedFile(&'static str),
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    // signal processing
    #[error("input too short: need at least {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },
    #[error("mel band {band} has no FFT bins; reduce n_mels or increase n_fft")]
    DegenerateBand { band: usize },
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("only {found} voiced frames, need at least {needed}")]
    InsufficientVoicedFrames { needed: usize, found: usize },

    // quantizer
    #[error("k-means needs at least {k} distinct points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("non-finite input value at point {0}")]
    NonFiniteInput(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    // streams
    #[error("length mismatch: pitch has {pitch} frames, units have {units}")]
    LengthMismatch { pitch: usize, units: usize },
    #[error("frame rates {from} Hz and {to} Hz are not rationally related")]
    IncompatibleRates { from: f64, to: f64 },

    // codec
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unit {unit} never occurs and smoothing is zero")]
    ZeroProbability { unit: u32 },
    #[error("model vocabulary {model} does not match stream vocabulary {stream}")]
    ModelMismatch { model: u32, stream: u32 },
    #[error("entropy-coded stream requires the unigram model it was encoded with")]
    ModelRequired,
    #[error("model fingerprint mismatch: stream {stream}, model {model}")]
    ModelFingerprintMismatch { stream: String, model: String },
    #[error("payload ended after {0} bits")]
    TruncatedPayload(usize),
    #[error("invalid duration {0} s")]
    InvalidDuration(f64),

    // vocoder
    #[error("codebook was not trained on log-mel features of this configuration")]
    FeatureKindMismatch,
    #[error("vocabulary mismatch: expected K={expected}, got K={got}")]
    VocabMismatch { expected: u32, got: u32 },
    #[error("feature configuration mismatch: {0}")]
    ConfigMismatch(String),

    // probing
    #[error("empty sequence")]
    EmptySequence,
    #[error("need at least two classes with examples, got {0}")]
    DegenerateLabels(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

/// Coarse failure classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Io,
    Format,
    Config,
    Data,
    Model,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what,
            detail: detail.into(),
        }
    }

    pub fn category(&self) -> Category {
        use Error::*;
        match self {
            Io { .. } | Stream(_) => Category::Io,
            UnsupportedFormat(_)
            | CorruptHeader(_)
            | BadMagic { .. }
            | VersionMismatch { .. }
            | TruncatedFile(_)
            | NonFiniteEntry { .. }
            | Malformed { .. }
            | TruncatedPayload(_) => Category::Format,
            InvalidConfig(_)
            | DegenerateBand { .. }
            | IncompatibleRates { .. }
            | ConfigMismatch(_)
            | FeatureKindMismatch
            | InvalidDuration(_) => Category::Config,
            ModelMismatch { .. }
            | ModelRequired
            | ModelFingerprintMismatch { .. }
            | VocabMismatch { .. }
            | DimensionMismatch { .. } => Category::Model,
            InputTooShort { .. }
            | NonFiniteSample(_)
            | InsufficientVoicedFrames { .. }
            | TooFewPoints { .. }
            | NonFiniteInput(_)
            | LengthMismatch { .. }
            | EmptyCorpus
            | ZeroProbability { .. }
            | EmptySequence
            | DegenerateLabels(_)
            | InsufficientData(_) => Category::Data,
        }
    }
}
