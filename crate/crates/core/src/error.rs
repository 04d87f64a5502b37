use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty grid: width and height must both be at least 1 (got {width}x{height})")]
    EmptyGrid { width: usize, height: usize },

    #[error("buffer holds {actual} values but {width}x{height} needs {expected}")]
    BufferLength {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },

    #[error("pixel {index} is {value}, outside [0, 1]")]
    PixelRange { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("PGM parse error at byte {offset}: {reason}")]
    Pgm { offset: usize, reason: String },

    #[error("mask pixel {index} has value {value}; masks may only contain 0 or 255")]
    MaskValue { index: usize, value: u8 },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("infeasible parameter ranges: {0}")]
    InfeasibleRanges(String),

    #[error("empty prediction: no foreground pixels")]
    EmptyPrediction,

    #[error("mask columns are not contiguous (gap after column {after})")]
    NonContiguousColumns { after: usize },

    #[error("degenerate fit: need at least 2 distinct x values")]
    DegenerateFit,

    #[error("layer too steep: |slope| = {slope:.3} exceeds tan 60 degrees")]
    SteepLayer { slope: f64 },

    #[error("insufficient coverage: {valid} valid samples, need at least {required}")]
    InsufficientCoverage { valid: usize, required: usize },

    #[error("series length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty series")]
    EmptySeries,

    #[error("invalid fold count k={k} for n={n} samples")]
    InvalidFolds { k: usize, n: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("backward called without a train-mode forward cache")]
    MissingCache,

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Divergence { epoch: usize },

    #[error("unreadable files: {}", .0.join("; "))]
    CorruptFiles(Vec<String>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("weight file error at byte {offset}: {reason}")]
    ModelFormat { offset: usize, reason: String },

    #[error("architecture mismatch: expected tag {expected}, file has {found}")]
    ArchitectureMismatch { expected: u8, found: u8 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed or inconsistent inputs, as opposed
    /// to a pipeline stage that ran but could not produce a result.
    pub fn is_bad_input(&self) -> bool {
        !matches!(
            self,
            Error::EmptyPrediction
                | Error::NonContiguousColumns { .. }
                | Error::DegenerateFit
                | Error::SteepLayer { .. }
                | Error::InsufficientCoverage { .. }
                | Error::Divergence { .. }
        )
    }
}
