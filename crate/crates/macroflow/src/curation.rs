//! Flow-driven recursive skill evolution.
//!
//! At a plateau boundary the library is partitioned into prune / retain /
//! refine sets from per-skill flow statistics, refine shortens
//! context-inconsistent macros, and a rule-based creator mints new macros
//! at high-importance steps where success and failure trajectories from
//! the same task diverge. The next-phase library is the union of the
//! surviving, refined, and created skills; atomicity is checked on every
//! member.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::diagnostics::{SkillStats, StepCredit};
use crate::env::Trajectory;
use crate::library::{check_atomicity, Skill, SkillLibrary};
use crate::policy::PolicyParams;
use crate::{Error, Result};

/// Thresholds of the curation operator. The defaults are artifact
/// configuration, not reference values.
#[derive(Debug, Clone)]
pub struct CurationThresholds {
    /// Retain requires mean log-flow at or above this.
    pub g_thr: f64,
    /// Retain requires a Jensen gap at or below this.
    pub jensen_thr: f64,
    /// Prune after this many boundaries with negative centered share.
    pub prune_k: u32,
    /// Trigger steps need `log I(t)` at or above this.
    pub trigger_zeta: f64,
    /// Length of newly created macros.
    pub macro_len: usize,
    /// Atomicity length bound.
    pub l_max: usize,
    /// Minimum success-failure reward gap for an evidence pair.
    pub pair_margin: f64,
}

impl Default for CurationThresholds {
    fn default() -> Self {
        CurationThresholds {
            g_thr: 0.0,
            jensen_thr: 0.5,
            prune_k: 2,
            trigger_zeta: 5.0,
            macro_len: 2,
            l_max: 4,
            pair_margin: 0.5,
        }
    }
}

impl CurationThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.prune_k < 1 {
            return Err(Error::Config("prune_k must be at least 1".into()));
        }
        if self.macro_len == 0 || self.l_max == 0 || self.macro_len > self.l_max {
            return Err(Error::Config("need 1 <= macro_len <= l_max".into()));
        }
        for v in [self.g_thr, self.jensen_thr, self.trigger_zeta, self.pair_margin] {
            if !v.is_finite() {
                return Err(Error::Config("curation thresholds must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Disjoint classification of the current library.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub prune: Vec<String>,
    pub retain: Vec<String>,
    pub refine: Vec<String>,
}

/// Partition the library: prune persistently negative skills, retain
/// high-flow consistent ones, refine the rest. Zero-visit skills carry
/// no evidence and are routed to refine, not pruned.
pub fn classify_skills(
    library: &SkillLibrary,
    stats: &BTreeMap<String, SkillStats>,
    thresholds: &CurationThresholds,
) -> Classification {
    let mut out =
        Classification { prune: Vec::new(), retain: Vec::new(), refine: Vec::new() };
    for skill in library.iter() {
        if skill.negative_share_count >= thresholds.prune_k {
            out.prune.push(skill.id.clone());
        } else if let Some(s) = stats.get(&skill.id) {
            if s.g >= thresholds.g_thr && s.jensen_gap <= thresholds.jensen_thr {
                out.retain.push(skill.id.clone());
            } else {
                out.refine.push(skill.id.clone());
            }
        } else {
            out.refine.push(skill.id.clone());
        }
    }
    out
}

/// Increment `n^-` for every skill whose centered share is strictly
/// negative this boundary.
pub fn update_negative_counters(
    library: &SkillLibrary,
    stats: &BTreeMap<String, SkillStats>,
) -> SkillLibrary {
    let mut updated = library.clone();
    for skill in library.iter() {
        if let Some(s) = stats.get(&skill.id) {
            if s.centered_share < 0.0 {
                let mut bumped = skill.clone();
                bumped.negative_share_count += 1;
                updated.replace(bumped);
            }
        }
    }
    updated
}

/// A same-task success/failure pair with the success side's credits.
#[derive(Debug, Clone)]
pub struct EvidencePair {
    pub success: Trajectory,
    pub failure: Trajectory,
    pub success_credits: Vec<StepCredit>,
}

impl EvidencePair {
    pub fn reward_gap(&self) -> f64 {
        self.success.reward - self.failure.reward
    }
}

/// High-importance steps of the success trajectory not already covered
/// by a surviving or refined skill invocation.
pub fn find_trigger_steps(
    pair: &EvidencePair,
    covered_steps: &BTreeSet<usize>,
    thresholds: &CurationThresholds,
) -> Vec<usize> {
    if pair.success.history.task_id != pair.failure.history.task_id
        || pair.reward_gap() < thresholds.pair_margin
    {
        return Vec::new();
    }
    pair.success_credits
        .iter()
        .filter(|c| c.log_importance >= thresholds.trigger_zeta && !covered_steps.contains(&c.t))
        .map(|c| c.t)
        .collect()
}

/// Outcome of one creation attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CreateOutcome {
    Created(Skill),
    /// The expansion already exists under this id.
    Existing(String),
    /// Nothing usable at this step (no symbols, or a prefix conflict).
    Skipped,
}

/// Rule-based skill creator: the new macro spells the next `macro_len`
/// primitive symbols the success trajectory emitted from step `t` on.
pub fn create_skill(
    success: &Trajectory,
    trigger_step: usize,
    library: &SkillLibrary,
    thresholds: &CurationThresholds,
) -> CreateOutcome {
    let expansion: String = success
        .history
        .steps
        .iter()
        .skip(trigger_step)
        .flat_map(|s| s.action.emitted().iter().copied())
        .take(thresholds.macro_len.min(thresholds.l_max))
        .collect();
    if expansion.is_empty() {
        return CreateOutcome::Skipped;
    }
    if let Some(existing) = library.find_by_expansion(&expansion) {
        return CreateOutcome::Existing(existing.id.clone());
    }
    if library.prefix_conflict(&expansion) {
        return CreateOutcome::Skipped;
    }
    let skill = Skill {
        id: library.next_id(),
        expansion,
        phase_created: library.phase + 1,
        negative_share_count: 0,
    };
    debug_assert!(check_atomicity(&skill, thresholds.l_max));
    CreateOutcome::Created(skill)
}

/// Refine mode: drop one trailing symbol when longer than one, keeping
/// the id.
pub fn refine_skill(skill: &Skill, thresholds: &CurationThresholds) -> Skill {
    let mut refined = skill.clone();
    if refined.expansion.chars().count() > 1 {
        refined.expansion.pop();
    }
    debug_assert!(check_atomicity(&refined, thresholds.l_max));
    refined
}

#[derive(Debug, Clone, Serialize)]
pub struct SkillStatLine {
    pub id: String,
    pub g: f64,
    pub lambda1: f64,
    pub centered_share: f64,
    pub jensen_gap: f64,
    pub trajectory_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineRecord {
    pub id: String,
    pub old_expansion: String,
    pub new_expansion: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CreateRecord {
    pub id: String,
    pub expansion: String,
    pub task: String,
    pub trigger_step: usize,
}

/// Replayable record of one boundary.
#[derive(Debug, Clone, Serialize)]
pub struct CurationEvent {
    pub step: usize,
    pub phase_from: u32,
    pub phase_to: u32,
    pub stats: Vec<SkillStatLine>,
    pub pruned: Vec<String>,
    pub retained: Vec<String>,
    pub refined: Vec<RefineRecord>,
    pub created: Vec<CreateRecord>,
    pub library: Vec<(String, String)>,
}

/// The evolution operator: produce the phase `k+1` library from flow
/// statistics and success/failure evidence.
pub fn curate(
    library: &SkillLibrary,
    stats: &BTreeMap<String, SkillStats>,
    pairs: &[EvidencePair],
    thresholds: &CurationThresholds,
) -> Result<(SkillLibrary, CurationEvent)> {
    thresholds.validate()?;
    let counted = update_negative_counters(library, stats);
    let classes = classify_skills(&counted, stats, thresholds);

    let mut next = SkillLibrary::empty();
    next.phase = library.phase + 1;
    let mut refined_records = Vec::new();
    for id in &classes.retain {
        next.insert(counted.get(id).unwrap().clone())?;
    }
    for id in &classes.refine {
        let old = counted.get(id).unwrap().clone();
        let refined = refine_skill(&old, thresholds);
        // A shortening that collides with another expansion is withdrawn.
        let keep = if next.find_by_expansion(&refined.expansion).is_some()
            || next.prefix_conflict(&refined.expansion)
        {
            old.clone()
        } else {
            refined
        };
        if next.find_by_expansion(&keep.expansion).is_some() || next.prefix_conflict(&keep.expansion)
        {
            continue;
        }
        if keep.expansion != old.expansion {
            refined_records.push(RefineRecord {
                id: keep.id.clone(),
                old_expansion: old.expansion.clone(),
                new_expansion: keep.expansion.clone(),
            });
        }
        next.insert(keep)?;
    }

    let covered: BTreeSet<usize> = BTreeSet::new();
    let mut created_records = Vec::new();
    for pair in pairs {
        // Steps of the success path already covered by surviving skills.
        let surviving: BTreeSet<&str> = classes
            .retain
            .iter()
            .chain(classes.refine.iter())
            .map(|s| s.as_str())
            .collect();
        let mut pair_covered = covered.clone();
        for (t, step) in pair.success.history.steps.iter().enumerate() {
            if step.action.kind == crate::env::ActionKind::Skill
                && surviving.contains(step.action.payload.as_str())
            {
                pair_covered.insert(t);
            }
        }
        for t in find_trigger_steps(pair, &pair_covered, thresholds) {
            match create_skill(&pair.success, t, &next, thresholds) {
                CreateOutcome::Created(skill) => {
                    created_records.push(CreateRecord {
                        id: skill.id.clone(),
                        expansion: skill.expansion.clone(),
                        task: pair.success.history.task_id.clone(),
                        trigger_step: t,
                    });
                    next.insert(skill)?;
                }
                CreateOutcome::Existing(_) | CreateOutcome::Skipped => {}
            }
        }
    }

    for skill in next.iter() {
        if !check_atomicity(skill, thresholds.l_max) {
            return Err(Error::Config(format!("non-atomic skill `{}` after curation", skill.id)));
        }
    }

    let event = CurationEvent {
        step: 0,
        phase_from: library.phase,
        phase_to: next.phase,
        stats: stats
            .values()
            .map(|s| SkillStatLine {
                id: s.skill_id.clone(),
                g: s.g,
                lambda1: s.lambda1,
                centered_share: s.centered_share,
                jensen_gap: s.jensen_gap,
                trajectory_count: s.trajectory_count,
            })
            .collect(),
        pruned: classes.prune,
        retained: classes.retain,
        refined: refined_records,
        created: created_records,
        library: next.iter().map(|s| (s.id.clone(), s.expansion.clone())).collect(),
    };
    Ok((next, event))
}

/// How the per-task log-partitions restart after a boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogZReset {
    /// Back to the configured initial value.
    Cold,
    /// Keep the trained values.
    Warm,
}

/// Warm-start into the next phase: keep the policy tables (new contexts
/// materialize lazily), restart the log-partitions per the toggle, and
/// clear the plateau history so the detector stays quiet for a full
/// `(M+1) * W` stretch.
pub fn phase_transition(
    params: &mut PolicyParams,
    loss_history: &mut Vec<f64>,
    reset: LogZReset,
) {
    if reset == LogZReset::Cold {
        params.reset_log_partitions();
    }
    loss_history.clear();
}
