use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {dim}: {reason}")]
    InvalidDimension { dim: usize, reason: &'static str },

    #[error(
        "displacement with |beta|^2 = {beta_sq:.3} risks truncation artifacts in dim {dim}; \
         use dim >= {recommended}"
    )]
    TruncationRisk {
        dim: usize,
        beta_sq: f64,
        recommended: usize,
    },

    #[error("unknown mode label `{0}`")]
    UnknownLabel(String),

    #[error("duplicate mode label `{0}`")]
    DuplicateLabel(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("partial trace needs at least one kept mode")]
    EmptyKeep,

    #[error("operator is not Hermitian (max deviation {0:e})")]
    NonHermitian(f64),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("inconsistent coherence for `{mode}`: T2 = {t2} us exceeds 2*T1 = {two_t1} us")]
    InconsistentCoherence { mode: String, t2: f64, two_t1: f64 },

    #[error("missing coherence data for `{0}`")]
    MissingCoherence(String),

    #[error("layout is missing mode `{0}`")]
    MissingMode(String),

    #[error("photon loss annihilated the state")]
    ZeroState,

    #[error("time {t} ns outside pulse window [0, {length}] ns")]
    OutOfWindow { t: f64, length: f64 },

    #[error("detuning {detuning:.4} rad/us is within the bus linewidth {kappa:.4} 1/us")]
    Resonance { detuning: f64, kappa: f64 },

    #[error("step-size guard violated: dt * max|H| = {0:.4} (must be < 0.1)")]
    StepSize(f64),

    #[error("objective diverged (NaN) at iteration {0}")]
    Divergence(usize),

    #[error("rank-deficient design: rank {rank} < {needed}")]
    RankDeficient { rank: usize, needed: usize },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("cooling did not succeed within {0} attempts")]
    CoolingTimeout(usize),

    #[error("invalid measurement outcome {0}")]
    InvalidOutcome(u8),

    #[error("missing component: {0}")]
    MissingComponent(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse(_)
                | Error::Json(_)
                | Error::UnknownLabel(_)
                | Error::DuplicateLabel(_)
                | Error::InconsistentCoherence { .. }
                | Error::MissingCoherence(_)
                | Error::MissingMode(_)
                | Error::InvalidDimension { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
