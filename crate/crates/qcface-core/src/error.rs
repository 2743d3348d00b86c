use thiserror::Error;

/// Everything that can go wrong across the crate.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("vector has zero (or non-finite) norm")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("proxy pair is numerically collinear (|cos| >= 1 - 1e-9)")]
    CollinearProxies,

    #[error("angle {theta} outside [0, pi]")]
    InvalidTheta { theta: f64 },

    #[error("need 0 < l_a < u_a, got l_a={l_a}, u_a={u_a}")]
    InvalidBounds { l_a: f64, u_a: f64 },

    #[error("guidance probability {p} outside [0, 1]")]
    InvalidGuidance { p: f64 },

    #[error("magnitude must be positive, got {value}")]
    NonPositiveMagnitude { value: f64 },

    #[error("gradient pole: |sin(m1*theta)| = {sin_abs:e} below 1e-8")]
    GradientPole { sin_abs: f64 },

    #[error("loss evaluated non-finite ({value})")]
    NonFiniteLoss { value: f64 },

    #[error("non-finite gradient during {context}")]
    NonFiniteGradient { context: String },

    #[error("scaling check requires a constant-margin loss")]
    NonConstantMargin,

    #[error("could not place {classes} prototypes at >= {min_deg} deg separation in {attempts} attempts")]
    PrototypeSeparationFailure {
        classes: usize,
        min_deg: f64,
        attempts: usize,
    },

    #[error("correlation needs n >= 3 and nonzero variance in both inputs")]
    DegenerateVariance,

    #[error("histogram edges must be strictly increasing with at least two entries")]
    BadEdges,

    #[error("score list is empty")]
    EmptyScores,

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
