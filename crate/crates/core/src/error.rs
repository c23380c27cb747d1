//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForgeError {
    /// Geometric input cannot produce a valid mask (collinear points,
    /// too few distinct points, out-of-bounds landmarks, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Mask augmentation removed all support; the caller should resample.
    #[error("mask support became empty during augmentation")]
    EmptyMask,

    /// A region partition produced an empty side that downstream losses need.
    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A feature vector with near-zero norm cannot be direction-normalized.
    #[error("zero-norm feature vector at index {0}")]
    ZeroVector(usize),

    #[error("selection budget {requested} exceeds available {available} channels")]
    InsufficientChannels { requested: usize, available: usize },

    /// External reconstructor adapter broke its contract.
    #[error("adapter failure: {0}")]
    AdapterFailure(String),

    /// Mask resampling retries were exhausted.
    #[error("synthesis failed after {attempts} mask attempts")]
    SynthesisFailure { attempts: u32 },

    #[error("record was produced by engine version {found}, this engine is {expected}")]
    VersionMismatch { found: String, expected: String },

    /// Regenerated bytes differ from the recorded sample.
    #[error("replay divergence for sample {sample_id}: {detail}")]
    ReplayDivergence { sample_id: String, detail: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    /// Original image carries no measurable high-band power.
    #[error("degenerate spectrum: high-band power below 1e-12")]
    DegenerateSpectrum,

    #[error("config error: {0}")]
    Config(String),

    /// Malformed tensor file, landmark file, or manifest.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ForgeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ForgeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ForgeError>;
