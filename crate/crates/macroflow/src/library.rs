//! Macro-action skills and the phase-frozen skill library.
//!
//! A skill is an atomic macro: a bounded string of primitive symbols that
//! a single `skill` action emits in one step. Libraries are immutable
//! within a training phase; only the curation operator produces the next
//! phase (see [`crate::curation`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// An atomic macro tip: a bounded, self-contained expansion of primitive
/// symbols, invocable as a single action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skill {
    pub id: String,
    /// Primitive symbols the macro emits, length in `[1, l_max]`.
    pub expansion: String,
    /// Library phase at which this skill entered the library.
    pub phase_created: u32,
    /// Number of phase boundaries with a negative centered flow share.
    pub negative_share_count: u32,
}

/// True iff the expansion is non-empty, within the length bound, and
/// self-contained: it spells primitive symbols only, never another
/// skill's identifier or an action marker.
pub fn check_atomicity(skill: &Skill, l_max: usize) -> bool {
    let len = skill.expansion.chars().count();
    len >= 1 && len <= l_max && skill.expansion.chars().all(|c| c.is_ascii_uppercase())
}

/// The per-phase set of skills. Frozen between phase boundaries; all
/// mutation goes through [`crate::curation::curate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillLibrary {
    pub phase: u32,
    skills: BTreeMap<String, Skill>,
    next_index: usize,
}

impl SkillLibrary {
    pub fn empty() -> Self {
        SkillLibrary { phase: 0, skills: BTreeMap::new(), next_index: 0 }
    }

    /// Seed library (phase 0) from initial expansions; ids are assigned
    /// `s0`, `s1`, ... in order.
    pub fn from_expansions(expansions: &[String], l_max: usize) -> Result<Self> {
        let mut lib = SkillLibrary::empty();
        for e in expansions {
            let skill = Skill {
                id: format!("s{}", lib.next_index),
                expansion: e.clone(),
                phase_created: 0,
                negative_share_count: 0,
            };
            if !check_atomicity(&skill, l_max) {
                return Err(Error::Config(format!("initial skill `{e}` is not atomic")));
            }
            lib.insert(skill)?;
        }
        Ok(lib)
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Skill> {
        self.skills.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.skills.contains_key(id)
    }

    /// Skills in deterministic (id-sorted) order.
    pub fn iter(&self) -> impl Iterator<Item = &Skill> {
        self.skills.values()
    }

    pub fn ids(&self) -> Vec<String> {
        self.skills.keys().cloned().collect()
    }

    /// The skill whose expansion equals `expansion`, if any.
    pub fn find_by_expansion(&self, expansion: &str) -> Option<&Skill> {
        self.skills.values().find(|s| s.expansion == expansion)
    }

    /// True iff `expansion` is a strict prefix of an existing expansion or
    /// vice versa. Expansions must stay prefix-free so that macro token
    /// sequences identify a unique skill.
    pub fn prefix_conflict(&self, expansion: &str) -> bool {
        self.skills.values().any(|s| {
            s.expansion != expansion
                && (s.expansion.starts_with(expansion) || expansion.starts_with(&s.expansion))
        })
    }

    pub fn next_id(&self) -> String {
        format!("s{}", self.next_index)
    }

    /// Insert a skill, enforcing id uniqueness and expansion prefix-freeness.
    pub fn insert(&mut self, skill: Skill) -> Result<()> {
        if self.skills.contains_key(&skill.id) {
            return Err(Error::Config(format!("duplicate skill id `{}`", skill.id)));
        }
        if self.find_by_expansion(&skill.expansion).is_some() || self.prefix_conflict(&skill.expansion)
        {
            return Err(Error::Config(format!(
                "skill expansion `{}` collides with an existing expansion",
                skill.expansion
            )));
        }
        if let Some(n) = skill.id.strip_prefix('s').and_then(|n| n.parse::<usize>().ok()) {
            self.next_index = self.next_index.max(n + 1);
        }
        self.skills.insert(skill.id.clone(), skill);
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Option<Skill> {
        self.skills.remove(id)
    }

    /// Replace a skill in place (same id), used by refine.
    pub fn replace(&mut self, skill: Skill) {
        self.skills.insert(skill.id.clone(), skill);
    }

    /// Content fingerprint; constant between phase boundaries.
    pub fn fingerprint(&self) -> String {
        let mut out = format!("phase={};", self.phase);
        for s in self.skills.values() {
            out.push_str(&format!("{}:{};", s.id, s.expansion));
        }
        out
    }
}
