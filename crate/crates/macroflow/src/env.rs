//! Synthetic goal-string orchestration environments.
//!
//! A task asks the agent to emit one of a set of goal strings over a
//! small symbol alphabet. Primitive actions emit one symbol, skill
//! actions emit a macro expansion, and `accept` terminates early. The
//! executor is frozen and deterministic: its observation is the length
//! of the longest goal prefix matched so far, information the forward
//! policy does not see until after acting. Every history strictly grows
//! under stepping, so the reachable state graph is a finite tree.

use serde::{Deserialize, Serialize};

use crate::library::{Skill, SkillLibrary};
use crate::{Error, Result};

/// Fixed reasoning placeholder: one uninformative token per step.
pub const REASONING_PLACEHOLDER: char = '*';

/// A task: goal strings with reward weights, an opaque guideline tag,
/// retrieved-skill context, and a step budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    /// `(goal string, reward weight in [0,1])`; best weighted prefix wins.
    pub goal_sequences: Vec<(String, f64)>,
    pub guideline_tag: String,
    pub retrieved_skill_ids: Vec<String>,
    /// Maximum number of action steps (`T_max`).
    pub horizon: usize,
}

impl Task {
    pub fn new(
        id: impl Into<String>,
        goal_sequences: Vec<(String, f64)>,
        guideline_tag: impl Into<String>,
        retrieved_skill_ids: Vec<String>,
        horizon: usize,
    ) -> Result<Self> {
        let task = Task {
            id: id.into(),
            goal_sequences,
            guideline_tag: guideline_tag.into(),
            retrieved_skill_ids,
            horizon,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |reason: &str| Error::InvalidTask { id: self.id.clone(), reason: reason.into() };
        if self.id.is_empty()
            || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(err("task ids must be non-empty and use [A-Za-z0-9_-]"));
        }
        if self.goal_sequences.is_empty() {
            return Err(err("at least one goal sequence is required"));
        }
        for (g, w) in &self.goal_sequences {
            if g.is_empty() {
                return Err(err("goal strings must be non-empty"));
            }
            if !(0.0..=1.0).contains(w) {
                return Err(err("goal rewards must lie in [0,1]"));
            }
        }
        let shortest = self.goal_sequences.iter().map(|(g, _)| g.chars().count()).min().unwrap();
        if self.horizon < shortest {
            return Err(err("horizon shorter than the shortest goal in primitive actions"));
        }
        Ok(())
    }
}

/// Action type selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    Skill,
    Act,
    Accept,
}

/// One orchestration action: a kind, its payload, and the serialized
/// token sequence of length `K_t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    /// Skill id for `Skill`, primitive symbol for `Act`, empty for `Accept`.
    pub payload: String,
    /// Serialized action tokens: the emitted symbols for `act`/`skill`,
    /// a single marker for `accept`.
    pub token_seq: Vec<char>,
}

impl Action {
    pub fn accept() -> Self {
        Action { kind: ActionKind::Accept, payload: String::new(), token_seq: vec!['!'] }
    }

    pub fn primitive(symbol: char) -> Self {
        Action { kind: ActionKind::Act, payload: symbol.to_string(), token_seq: vec![symbol] }
    }

    pub fn skill(skill: &Skill) -> Self {
        Action {
            kind: ActionKind::Skill,
            payload: skill.id.clone(),
            token_seq: skill.expansion.chars().collect(),
        }
    }

    /// Number of serialized tokens (`K_t`).
    pub fn token_len(&self) -> usize {
        self.token_seq.len()
    }

    /// Symbols this action emits toward the goal string.
    pub fn emitted(&self) -> &[char] {
        match self.kind {
            ActionKind::Accept => &[],
            _ => &self.token_seq,
        }
    }

    /// Compact unambiguous serialization, also used in context windows:
    /// `!` for accept, `A` for a primitive, `+AB` for a macro.
    pub fn serialize(&self) -> String {
        match self.kind {
            ActionKind::Accept => "!".to_string(),
            ActionKind::Act => self.payload.clone(),
            ActionKind::Skill => {
                let mut s = String::with_capacity(self.token_seq.len() + 1);
                s.push('+');
                s.extend(self.token_seq.iter());
                s
            }
        }
    }
}

/// Frozen-executor feedback for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecObservation {
    /// Length of the longest goal prefix matched by the emission so far.
    pub progress_signal: usize,
    pub terminal_flag: bool,
}

/// One appended step: fixed reasoning placeholder, action, observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub reasoning: char,
    pub action: Action,
    pub obs: ExecObservation,
}

/// An interaction history: the tree node type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub task_id: String,
    pub steps: Vec<StepRecord>,
    /// Concatenation of all action expansions in order.
    pub emitted: String,
}

impl History {
    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    /// Goal progress after the last step (0 at the initial state).
    pub fn progress(&self) -> usize {
        self.steps.last().map(|s| s.obs.progress_signal).unwrap_or(0)
    }

    pub fn last_action(&self) -> Option<&Action> {
        self.steps.last().map(|s| &s.action)
    }

    /// Serialized actions, oldest first; the policy window is a suffix
    /// of this list.
    pub fn action_tokens(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.action.serialize()).collect()
    }

    /// Canonical serialization. Strictly grows with every appended step,
    /// and two distinct histories of the same task never collide because
    /// action serializations are unambiguous.
    pub fn serialization(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.task_id);
        s.push('#');
        for step in &self.steps {
            s.push(step.reasoning);
            s.push_str(&step.action.serialize());
            s.push('/');
            s.push_str(&step.obs.progress_signal.to_string());
            s.push(if step.obs.terminal_flag { 'T' } else { 'c' });
            s.push('|');
        }
        s.push_str(&format!("#d{}", self.depth()));
        s
    }

    /// Parent history (drop the last step); `None` at the initial state.
    pub fn parent(&self) -> Option<History> {
        if self.steps.is_empty() {
            return None;
        }
        let mut parent = self.clone();
        let last = parent.steps.pop().unwrap();
        let n = parent.emitted.chars().count() - last.action.emitted().len();
        parent.emitted = parent.emitted.chars().take(n).collect();
        Some(parent)
    }
}

/// A complete rollout with its terminal reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub history: History,
    /// Terminal reward in `[0,1]`.
    pub reward: f64,
    /// `reward + eps_min`, strictly positive.
    pub smoothed_reward: f64,
}

impl Trajectory {
    /// Number of action edges (`T`).
    pub fn length(&self) -> usize {
        self.history.depth()
    }
}

/// The environment family: one alphabet shared by a set of tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub alphabet: Vec<char>,
    pub tasks: Vec<Task>,
}

impl Environment {
    pub fn new(alphabet: Vec<char>, tasks: Vec<Task>) -> Result<Self> {
        if alphabet.is_empty() {
            return Err(Error::Config("alphabet must be non-empty".into()));
        }
        for c in &alphabet {
            if !c.is_ascii_uppercase() {
                return Err(Error::Config(format!("alphabet symbol `{c}` must be A-Z")));
            }
        }
        let mut sorted = alphabet.clone();
        sorted.dedup();
        if sorted.len() != alphabet.len() {
            return Err(Error::Config("alphabet symbols must be distinct".into()));
        }
        for t in &tasks {
            t.validate()?;
            for (g, _) in &t.goal_sequences {
                if !g.chars().all(|c| alphabet.contains(&c)) {
                    return Err(Error::InvalidTask {
                        id: t.id.clone(),
                        reason: format!("goal `{g}` uses symbols outside the alphabet"),
                    });
                }
            }
        }
        Ok(Environment { alphabet, tasks })
    }

    pub fn task(&self, id: &str) -> Result<&Task> {
        self.tasks.iter().find(|t| t.id == id).ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    /// Initial history for a task: depth 0, nothing emitted, the initial
    /// context (task, retrieved skills, guideline) encoded in the task id
    /// binding of the serialization.
    pub fn reset(&self, task: &Task) -> Result<History> {
        self.task(&task.id)?;
        Ok(History { task_id: task.id.clone(), steps: Vec::new(), emitted: String::new() })
    }

    /// True iff the last action was `accept` or the step budget is spent.
    pub fn is_terminal(&self, history: &History, task: &Task) -> bool {
        if history.depth() >= task.horizon {
            return true;
        }
        matches!(history.last_action(), Some(a) if a.kind == ActionKind::Accept)
    }

    /// Apply one action. Pure in `(history, action, library)`.
    pub fn step(
        &self,
        history: &History,
        action: &Action,
        library: &SkillLibrary,
    ) -> Result<(ExecObservation, History)> {
        let task = self.task(&history.task_id)?;
        if self.is_terminal(history, task) {
            return Err(Error::TerminalHistory(task.id.clone()));
        }
        match action.kind {
            ActionKind::Skill => {
                let skill = library
                    .get(&action.payload)
                    .ok_or_else(|| Error::UnknownSkill(action.payload.clone()))?;
                if skill.expansion.chars().collect::<Vec<_>>() != action.token_seq {
                    return Err(Error::IllegalAction {
                        action: action.serialize(),
                        reason: "token sequence does not match the library expansion".into(),
                    });
                }
            }
            ActionKind::Act => {
                let sym = action.token_seq.first().copied().unwrap_or(' ');
                if action.token_seq.len() != 1 || !self.alphabet.contains(&sym) {
                    return Err(Error::IllegalAction {
                        action: action.serialize(),
                        reason: "primitive action must emit one alphabet symbol".into(),
                    });
                }
            }
            ActionKind::Accept => {}
        }

        let mut emitted = history.emitted.clone();
        emitted.extend(action.emitted().iter());
        let progress = best_prefix_progress(&emitted, &task.goal_sequences);
        let terminal =
            action.kind == ActionKind::Accept || history.depth() + 1 >= task.horizon;
        let obs = ExecObservation { progress_signal: progress, terminal_flag: terminal };

        let mut next = history.clone();
        next.steps.push(StepRecord {
            reasoning: REASONING_PLACEHOLDER,
            action: action.clone(),
            obs,
        });
        next.emitted = emitted;
        Ok((obs, next))
    }

    /// Terminal reward: the best weighted goal-prefix fraction.
    pub fn reward(&self, trajectory: &Trajectory, task: &Task) -> Result<f64> {
        if !self.is_terminal(&trajectory.history, task) {
            return Err(Error::NonTerminalTrajectory);
        }
        Ok(reward_of_emission(&trajectory.history.emitted, &task.goal_sequences))
    }
}

/// Every action legal at a non-terminal state, in canonical order:
/// accept, primitives in alphabet order, skills in id order. The action
/// space does not depend on the state, only on the library.
pub fn legal_actions(env: &Environment, library: &SkillLibrary) -> Vec<Action> {
    let mut out = Vec::with_capacity(1 + env.alphabet.len() + library.len());
    out.push(Action::accept());
    for &c in &env.alphabet {
        out.push(Action::primitive(c));
    }
    for skill in library.iter() {
        out.push(Action::skill(skill));
    }
    out
}

/// Length of the longest common prefix of `emitted` and any goal.
pub fn best_prefix_progress(emitted: &str, goals: &[(String, f64)]) -> usize {
    goals.iter().map(|(g, _)| common_prefix_len(emitted, g)).max().unwrap_or(0)
}

/// `max_g weight(g) * matched_prefix_len(emitted, g) / |g|`.
pub fn reward_of_emission(emitted: &str, goals: &[(String, f64)]) -> f64 {
    goals
        .iter()
        .map(|(g, w)| w * common_prefix_len(emitted, g) as f64 / g.chars().count() as f64)
        .fold(0.0, f64::max)
}

fn common_prefix_len(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count()
}

/// `r + eps`, rejecting non-positive epsilon.
pub fn smooth_reward(reward: f64, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::NonPositiveEpsilon(eps));
    }
    Ok(reward + eps)
}
