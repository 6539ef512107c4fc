use thiserror::Error;

use crate::transport::DecodeError;
use crate::AgentId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Integration produced a non-finite state.
    #[error("model diverged{}", agent.map(|a| format!(" for agent {a}")).unwrap_or_default())]
    ModelDivergence { agent: Option<AgentId> },

    /// A caller broke an operation's precondition (dimension mismatch, negative delay, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Decode(#[from] DecodeError),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("fleet: {0}")]
    Fleet(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
