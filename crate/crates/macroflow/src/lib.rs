//! Flow-matching training for compositional orchestration policies.
//!
//! The crate trains a tabular forward policy, a hindsight-conditioned
//! backward policy, and a per-task log-partition scalar against the
//! tempered trajectory-balance (TTB) objective, on synthetic goal-string
//! environments whose state graphs are exactly enumerable trees. A
//! brute-force flow oracle computes the unique reward-matching flow on
//! each tree and checks conservation, trajectory balance, detailed
//! balance, and flow decomposition against it. Flow diagnostics (per-step
//! importance, telescoped state flows, per-skill cumulant generating
//! functions) are recovered from quantities the loss already evaluates,
//! and drive recursive evolution of a macro-action skill library.
//!
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run --release --example oracle_checks
//! cargo run --release --example train_reward_matching
//! cargo run --release --example per_step_credit
//! cargo run --release --example diversity_vs_reinforce
//! cargo run --release --example skill_evolution
//! ```
//!
//! or the CLI (`macroflow train|verify|dump-dag|diagnose|fixture-q4`).

pub mod commands;
pub mod config;
pub mod curation;
pub mod diagnostics;
pub mod env;
pub mod library;
pub mod oracle;
pub mod policy;
pub mod runner;
pub mod trainer;

mod error;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
