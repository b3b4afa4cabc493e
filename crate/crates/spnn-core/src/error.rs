//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in slot `{slot}`{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { slot: String, step: Option<usize> },

    #[error("invalid time step dt = {dt}; dt must be positive")]
    InvalidTimeStep { dt: f64 },

    #[error("training diverged (non-finite loss) at epoch {epoch}, case {case}, snapshot {snapshot}")]
    TrainingDiverged {
        epoch: usize,
        case: usize,
        snapshot: usize,
    },

    #[error("rollout produced a non-finite state at step {step}")]
    RolloutBlowup { step: usize },

    #[error("degenerate pendulum configuration (spring length {length:.3e} below {min:.1e}); resample the initial condition")]
    DegenerateConfiguration { length: f64, min: f64 },

    #[error("explicit diffusion step violates the CFL bound: dt·(1-eps)/(Re·dy^2) = {cfl_number:.3} > 0.5")]
    CflViolation { cfl_number: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("manifest is missing required key `{0}`")]
    MissingManifestKey(String),

    #[error("checksum mismatch for `{name}`: manifest {expected}, file {actual}")]
    ChecksumMismatch {
        name: String,
        expected: String,
        actual: String,
    },

    #[error("unsupported format version `{got}` (expected `{expected}`)")]
    VersionMismatch { expected: String, got: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
