//! Crate-wide error type.

use thiserror::Error;

use crate::model::LossBreakdown;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The tape references a node before its definition.
    #[error("corrupt tape: {0}")]
    CorruptTape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible alignment: {phonemes} phonemes cannot align onto {frames} frames")]
    InfeasibleAlignment { phonemes: usize, frames: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error in utterance {utterance_id}: {message}")]
    Validation { utterance_id: usize, message: String },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("training diverged at step {step}: non-finite loss ({breakdown:?})")]
    TrainingDiverged {
        step: usize,
        breakdown: LossBreakdown,
    },

    #[error("checkpoint integrity error: {0}")]
    CheckpointIntegrity(String),

    #[error("checkpoint version mismatch: file has version {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
