//! Run configuration: a flat, documented key-value file (TOML syntax).
//!
//! Unknown keys are rejected, every default is spelled out here, and no
//! environment variable affects numerics. A minimal config is just an
//! environment plus a seed:
//!
//! ```toml
//! alphabet = "AB"
//! goals = [["AB", 1.0]]
//! horizon = 2
//! seed = 7
//! max_steps = 2000
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::curation::{CurationThresholds, LogZReset};
use crate::env::{Environment, Task};
use crate::library::SkillLibrary;
use crate::policy::PolicyParams;
use crate::trainer::TtbConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ttb,
    Reinforce,
    Grpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZReset {
    Cold,
    Warm,
}

/// Additional tasks beyond the default `t0` built from the top-level keys.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub goals: Vec<(String, f64)>,
    pub horizon: Option<usize>,
    pub guideline: Option<String>,
}

fn d_window() -> usize {
    12
}
fn d_logz_init() -> f64 {
    -2.30
}
fn d_beta() -> f64 {
    1.0
}
fn d_eps_min() -> f64 {
    0.1
}
fn d_lr() -> f64 {
    1e-4
}
fn d_grad_clip() -> f64 {
    3.0
}
fn d_kl_coeff() -> f64 {
    0.01
}
fn d_tasks_per_batch() -> usize {
    7
}
fn d_trajs_per_task() -> usize {
    4
}
fn d_window_w() -> usize {
    20
}
fn d_tol_rho() -> f64 {
    0.02
}
fn d_consecutive_m() -> usize {
    3
}
fn d_true() -> bool {
    true
}
fn d_g_thr() -> f64 {
    0.0
}
fn d_jensen_thr() -> f64 {
    0.5
}
fn d_prune_k() -> u32 {
    2
}
fn d_trigger_zeta() -> f64 {
    5.0
}
fn d_macro_len() -> usize {
    2
}
fn d_l_max() -> usize {
    4
}
fn d_pair_margin() -> f64 {
    0.5
}
fn d_logz_reset() -> ZReset {
    ZReset::Cold
}
fn d_algorithm() -> Algorithm {
    Algorithm::Ttb
}
fn d_node_budget() -> usize {
    1_000_000
}
fn d_guideline() -> String {
    "g0".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // --- environment ---
    /// Primitive symbols, e.g. "ABC".
    pub alphabet: String,
    /// Goal strings with reward weights for the default task `t0`.
    pub goals: Vec<(String, f64)>,
    /// Step budget `T_max`.
    pub horizon: usize,
    /// Seed macro expansions; ids are assigned s0, s1, ...
    #[serde(default)]
    pub initial_skills: Vec<String>,
    /// Guideline tag of the default task.
    #[serde(default = "d_guideline")]
    pub guideline: String,
    /// Extra tasks sharing the alphabet.
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,

    // --- policy ---
    /// Forward context window (last k actions).
    #[serde(default = "d_window")]
    pub window_fwd: usize,
    /// Backward context window; defaults to `window_fwd`.
    #[serde(default)]
    pub window_bwd: Option<usize>,
    #[serde(default = "d_logz_init")]
    pub logz_init: f64,

    // --- TTB loss and optimizer ---
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_eps_min")]
    pub eps_min: f64,
    /// Base learning rate for all three parameter groups.
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_theta: Option<f64>,
    #[serde(default)]
    pub lr_phi: Option<f64>,
    #[serde(default)]
    pub lr_z: Option<f64>,
    #[serde(default = "d_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "d_kl_coeff")]
    pub kl_coeff: f64,
    #[serde(default = "d_tasks_per_batch")]
    pub tasks_per_batch: usize,
    #[serde(default = "d_trajs_per_task")]
    pub trajectories_per_task: usize,
    #[serde(default)]
    pub phi_stop_gradient: bool,
    #[serde(default)]
    pub adaptive: bool,

    // --- plateau rule ---
    #[serde(default = "d_window_w")]
    pub window_w: usize,
    #[serde(default = "d_tol_rho")]
    pub tol_rho: f64,
    #[serde(default = "d_consecutive_m")]
    pub consecutive_m: usize,

    // --- curation ---
    #[serde(default = "d_true")]
    pub curation_enabled: bool,
    #[serde(default = "d_g_thr")]
    pub g_thr: f64,
    #[serde(default = "d_jensen_thr")]
    pub jensen_thr: f64,
    #[serde(default = "d_prune_k")]
    pub prune_k: u32,
    #[serde(default = "d_trigger_zeta")]
    pub trigger_zeta: f64,
    #[serde(default = "d_macro_len")]
    pub macro_len: usize,
    #[serde(default = "d_l_max")]
    pub l_max: usize,
    #[serde(default = "d_pair_margin")]
    pub pair_margin: f64,
    #[serde(default = "d_logz_reset")]
    pub logz_reset: ZReset,

    // --- run ---
    pub seed: u64,
    pub max_steps: usize,
    #[serde(default = "d_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "d_node_budget")]
    pub node_budget: usize,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.environment()?;
        self.library()?;
        self.ttb_config().validate()?;
        self.thresholds().validate()?;
        if self.algorithm == Algorithm::Grpo && self.trajectories_per_task < 2 {
            return Err(Error::Config(
                "grpo needs trajectories_per_task >= 2 for group advantages".into(),
            ));
        }
        Ok(())
    }

    pub fn environment(&self) -> Result<Environment> {
        let retrieved: Vec<String> =
            (0..self.initial_skills.len()).map(|i| format!("s{i}")).collect();
        let mut tasks = vec![Task::new(
            "t0",
            self.goals.clone(),
            self.guideline.clone(),
            retrieved.clone(),
            self.horizon,
        )?];
        for spec in &self.tasks {
            tasks.push(Task::new(
                spec.id.clone(),
                spec.goals.clone(),
                spec.guideline.clone().unwrap_or_else(|| self.guideline.clone()),
                retrieved.clone(),
                spec.horizon.unwrap_or(self.horizon),
            )?);
        }
        Environment::new(self.alphabet.chars().collect(), tasks)
    }

    pub fn library(&self) -> Result<SkillLibrary> {
        SkillLibrary::from_expansions(&self.initial_skills, self.l_max)
    }

    pub fn policy(&self, env: &Environment) -> PolicyParams {
        PolicyParams::new(
            env,
            self.window_fwd,
            self.window_bwd.unwrap_or(self.window_fwd),
            self.logz_init,
        )
    }

    pub fn ttb_config(&self) -> TtbConfig {
        TtbConfig {
            beta: self.beta,
            eps_min: self.eps_min,
            lr_theta: self.lr_theta.unwrap_or(self.lr),
            lr_phi: self.lr_phi.unwrap_or(self.lr),
            lr_z: self.lr_z.unwrap_or(self.lr),
            grad_clip: self.grad_clip,
            kl_coeff: self.kl_coeff,
            tasks_per_batch: self.tasks_per_batch,
            trajectories_per_task: self.trajectories_per_task,
            window_w: self.window_w,
            tol_rho: self.tol_rho,
            consecutive_m: self.consecutive_m,
            phi_stop_gradient: self.phi_stop_gradient,
            adaptive: self.adaptive,
        }
    }

    pub fn thresholds(&self) -> CurationThresholds {
        CurationThresholds {
            g_thr: self.g_thr,
            jensen_thr: self.jensen_thr,
            prune_k: self.prune_k,
            trigger_zeta: self.trigger_zeta,
            macro_len: self.macro_len,
            l_max: self.l_max,
            pair_margin: self.pair_margin,
        }
    }

    pub fn logz_reset(&self) -> LogZReset {
        match self.logz_reset {
            ZReset::Cold => LogZReset::Cold,
            ZReset::Warm => LogZReset::Warm,
        }
    }
}
