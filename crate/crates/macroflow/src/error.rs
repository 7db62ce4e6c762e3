use thiserror::Error;

/// Error type shared by all modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task `{id}`: {reason}")]
    InvalidTask { id: String, reason: String },

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("skill `{0}` is not in the library")]
    UnknownSkill(String),

    #[error("cannot step a terminal history (task `{0}`)")]
    TerminalHistory(String),

    #[error("trajectory is not terminal")]
    NonTerminalTrajectory,

    #[error("illegal action `{action}` at the current state: {reason}")]
    IllegalAction { action: String, reason: String },

    #[error("observation inconsistent with the transition: {0}")]
    InconsistentObservation(String),

    #[error("smoothing epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),

    #[error("temperature beta must be positive, got {0}")]
    NonPositiveBeta(f64),

    #[error("enumeration exceeded the node budget of {0}")]
    NodeBudgetExceeded(usize),

    #[error("graph is not a tree: node `{0}` has multiple parents")]
    NotATree(String),

    #[error("zero smoothed reward encountered (epsilon misconfigured?)")]
    ZeroSmoothedReward,

    #[error("empty visit set")]
    EmptyVisits,

    #[error("skill `{0}` has no recorded visits")]
    NoVisits(String),

    #[error("terminal state has no action distribution")]
    TerminalState,

    #[error("loss history too short: need at least {need}, have {have}")]
    InsufficientHistory { need: usize, have: usize },

    #[error("non-finite gradient produced by trajectory {trajectory} (task `{task}`)")]
    NonFiniteGradient { trajectory: usize, task: String },

    #[error("advantage group for task `{0}` has fewer than 2 trajectories")]
    GroupTooSmall(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint parse error at line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },

    #[error("fixture check failed:\n{0}")]
    Fixture(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
