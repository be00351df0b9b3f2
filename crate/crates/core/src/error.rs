//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid optimizer config: {0}")]
    Config(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("invalid micro-batch plan: mini-batch size {minibatch} not divisible by {divisor}")]
    Divisibility { minibatch: usize, divisor: usize },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("worker replicas diverged at mini-batch boundary {step}")]
    ReplicaDivergence { step: usize },

    #[error("mismatched run configurations: {0}")]
    RunMismatch(String),

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("no model in the family fits the capacity")]
    NoneFits,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("snapshot format error: {0}")]
    Snapshot(String),
}

pub type Result<T> = std::result::Result<T, Error>;
