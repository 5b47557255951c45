use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not place {robots} robots at least {safety} m apart after {attempts} draws")]
    InfeasibleInit {
        robots: usize,
        safety: f64,
        attempts: usize,
    },
    #[error("robots {i} and {j} occupy the same position")]
    CoincidentRobots { i: usize, j: usize },
    #[error("robot {robot} is not strictly outside obstacle {obstacle}")]
    InsideObstacle { robot: usize, obstacle: usize },
    #[error("points coincide; relative state is undefined")]
    CoincidentPoints,
    #[error("non-finite control for robot {robot}")]
    NonFiniteControl { robot: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("history expects time step {expected}, got {got}")]
    NonConsecutiveFrame { expected: usize, got: usize },
    #[error("corrupt {kind} file {path}: {reason}")]
    Corrupt {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },
    #[error("{kind} file {path} has format version {found}, expected {expected}")]
    Version {
        kind: &'static str,
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    VariantMismatch { expected: String, found: String },
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("{context}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] swarmnet_nn::NnError),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
