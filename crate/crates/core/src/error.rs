use thiserror::Error;

/// Errors raised by the planning, simulation and estimation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid model: {}", .0.join("; "))]
    InvalidModel(Vec<String>),
    #[error("strategy has {got} entries but the model has {expected} states")]
    StrategyLength { expected: usize, got: usize },
    #[error("decision {decision} out of range for state {state} (K = {num_decisions})")]
    DecisionOutOfRange {
        state: usize,
        decision: usize,
        num_decisions: usize,
    },
    #[error("state index {state} out of range (m = {num_states})")]
    StateOutOfRange { state: usize, num_states: usize },
    #[error("chain has no unique stationary distribution")]
    NonErgodic,
    #[error("strategy space K^m = {decisions}^{states} exceeds the cap of {cap}")]
    StrategySpaceTooLarge {
        states: usize,
        decisions: usize,
        cap: u64,
    },
    #[error("every strategy yields a chain without a unique stationary distribution")]
    NoFeasibleStrategy,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{0} must be finite")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("episode is empty")]
    EmptyEpisode,
    #[error("episode is not chain-consistent at step {0}")]
    BrokenChain(usize),
    #[error("robot is boxed in on all headings")]
    Stuck,
    #[error("invalid room: {0}")]
    InvalidRoom(String),
}

pub type Result<T> = std::result::Result<T, Error>;
