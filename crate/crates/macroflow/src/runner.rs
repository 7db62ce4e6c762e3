//! The experiment driver: seeded rollouts, the train / plateau / curate
//! phase loop, and the run artifacts (metrics CSV, trajectory JSONL,
//! curation JSONL, checkpoint).
//!
//! Rollout randomness comes from a counter-based generator with one
//! substream per (step, batch slot), so results are independent of the
//! worker count and bit-identical across reruns of the same seed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, RunConfig};
use crate::curation::{curate, phase_transition, CurationEvent, EvidencePair};
use crate::diagnostics::{credits_from_lps, SkillVisits};
use crate::env::{ActionKind, Environment, Task, Trajectory};
use crate::library::SkillLibrary;
use crate::policy::PolicyParams;
use crate::trainer::{
    grpo_step, plateau_detect, reinforce_step, train_step, OptState, ResidualRecord, TtbConfig,
};
use crate::{Error, Result};

/// One metrics row; the CSV columns are exactly these, in this order.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_ttb: f64,
    pub mean_reward: f64,
    pub mean_abs_delta: f64,
    pub flow_entropy: f64,
    pub logz_mean: f64,
    pub library_size: usize,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
    pub plateau_flag: bool,
    /// Kept in memory for analysis; not a CSV column.
    #[serde(skip)]
    pub grad_variance: f64,
}

pub const METRICS_HEADER: &str = "step,loss_ttb,mean_reward,mean_abs_delta,flow_entropy,logZ_mean,library_size,grad_norm_theta,grad_norm_phi,plateau_flag";

impl StepMetrics {
    fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{},{:?},{:?},{}",
            self.step,
            self.loss_ttb,
            self.mean_reward,
            self.mean_abs_delta,
            self.flow_entropy,
            self.logz_mean,
            self.library_size,
            self.grad_norm_theta,
            self.grad_norm_phi,
            if self.plateau_flag { 1 } else { 0 }
        )
    }
}

/// One trajectory as logged to `trajectories.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajRecord {
    pub step: usize,
    pub task: String,
    pub reward: f64,
    pub smoothed: f64,
    pub delta: f64,
    pub length: usize,
    pub logz: f64,
    pub steps: Vec<StepLine>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLine {
    pub kind: String,
    pub payload: String,
    pub tokens: String,
    pub progress: usize,
    pub terminal: bool,
    pub fwd_lp: f64,
    pub bwd_lp: f64,
}

impl TrajRecord {
    fn new(step: usize, tau: &Trajectory, rec: &ResidualRecord, logz: f64) -> Self {
        TrajRecord {
            step,
            task: tau.history.task_id.clone(),
            reward: tau.reward,
            smoothed: tau.smoothed_reward,
            delta: rec.delta,
            length: rec.length,
            logz,
            steps: tau
                .history
                .steps
                .iter()
                .zip(rec.per_step_forward_lp.iter().zip(&rec.per_step_backward_lp))
                .map(|(s, (f, b))| StepLine {
                    kind: match s.action.kind {
                        ActionKind::Skill => "skill".into(),
                        ActionKind::Act => "act".into(),
                        ActionKind::Accept => "accept".into(),
                    },
                    payload: s.action.payload.clone(),
                    tokens: s.action.token_seq.iter().collect(),
                    progress: s.obs.progress_signal,
                    terminal: s.obs.terminal_flag,
                    fwd_lp: *f,
                    bwd_lp: *b,
                })
                .collect(),
        }
    }
}

/// Full in-memory result of a run.
pub struct RunOutcome {
    pub metrics: Vec<StepMetrics>,
    pub boundaries: Vec<CurationEvent>,
    pub params: PolicyParams,
    pub library: SkillLibrary,
    pub env: Environment,
}

struct Sinks {
    metrics: Option<BufWriter<File>>,
    trajectories: Option<BufWriter<File>>,
    curation: Option<BufWriter<File>>,
}

impl Sinks {
    fn at(dir: Option<&Path>) -> Result<Self> {
        match dir {
            None => Ok(Sinks { metrics: None, trajectories: None, curation: None }),
            Some(d) => {
                std::fs::create_dir_all(d)?;
                let mut metrics = BufWriter::new(File::create(d.join("metrics.csv"))?);
                writeln!(metrics, "{METRICS_HEADER}")?;
                Ok(Sinks {
                    metrics: Some(metrics),
                    trajectories: Some(BufWriter::new(File::create(
                        d.join("trajectories.jsonl"),
                    )?)),
                    curation: Some(BufWriter::new(File::create(d.join("curation.jsonl"))?)),
                })
            }
        }
    }
}

/// Deterministic per-rollout stream id.
fn substream(step: usize, slot: usize) -> u64 {
    ((step as u64) << 20) | slot as u64
}

fn rollout_one(
    env: &Environment,
    library: &SkillLibrary,
    params: &PolicyParams,
    task: &Task,
    eps_min: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut h = env.reset(task)?;
    while !env.is_terminal(&h, task) {
        let action = params.sample_action(env, library, &h, rng)?;
        h = env.step(&h, &action, library)?.1;
    }
    let reward = crate::env::reward_of_emission(&h.emitted, &task.goal_sequences);
    Ok(Trajectory { history: h, reward, smoothed_reward: reward + eps_min })
}

/// Collect one batch; identical output for any worker count.
fn collect_batch(
    env: &Environment,
    library: &SkillLibrary,
    params: &PolicyParams,
    ttb: &TtbConfig,
    seed: u64,
    step: usize,
    workers: usize,
) -> Result<Vec<Trajectory>> {
    let n_tasks = env.tasks.len();
    let slots: Vec<(usize, &Task)> = (0..ttb.tasks_per_batch)
        .flat_map(|ti| {
            let task = &env.tasks[(step * ttb.tasks_per_batch + ti) % n_tasks];
            (0..ttb.trajectories_per_task)
                .map(move |k| (ti * ttb.trajectories_per_task + k, task))
        })
        .collect();

    let run_slot = |(slot, task): (usize, &Task)| -> Result<(usize, Trajectory)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(substream(step, slot));
        Ok((slot, rollout_one(env, library, params, task, ttb.eps_min, &mut rng)?))
    };

    let mut collected: Vec<(usize, Trajectory)> = if workers <= 1 {
        slots.into_iter().map(run_slot).collect::<Result<_>>()?
    } else {
        std::thread::scope(|scope| {
            let chunks: Vec<_> = slots.chunks(slots.len().div_ceil(workers)).collect();
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| scope.spawn(move || chunk.iter().copied().map(run_slot).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("rollout worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    collected.sort_by_key(|(slot, _)| *slot);
    Ok(collected.into_iter().map(|(_, t)| t).collect())
}

/// Extract per-skill visit sets from logged batch records.
pub fn collect_skill_visits(
    batch: &[(Trajectory, ResidualRecord)],
) -> BTreeMap<String, SkillVisits> {
    let mut out: BTreeMap<String, SkillVisits> = BTreeMap::new();
    for (tau, rec) in batch {
        let mut per_skill_this_traj: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut x = 0.0;
        for (i, step) in tau.history.steps.iter().enumerate() {
            x += rec.per_step_forward_lp[i] - rec.per_step_backward_lp[i];
            if step.action.kind == ActionKind::Skill {
                per_skill_this_traj.entry(step.action.payload.clone()).or_default().push(x);
            }
        }
        for (id, visits) in per_skill_this_traj {
            let entry = out
                .entry(id.clone())
                .or_insert_with(|| SkillVisits { skill_id: id, per_trajectory: Vec::new() });
            entry.per_trajectory.push(visits);
        }
    }
    out
}

/// Best/worst recent trajectory per task, paired when the reward gap
/// clears the margin.
fn build_pairs(
    window: &[(Trajectory, ResidualRecord)],
    margin: f64,
) -> Vec<EvidencePair> {
    let mut by_task: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (i, (tau, _)) in window.iter().enumerate() {
        let entry = by_task.entry(&tau.history.task_id).or_insert((i, i));
        if tau.reward > window[entry.0].0.reward {
            entry.0 = i;
        }
        if tau.reward < window[entry.1].0.reward {
            entry.1 = i;
        }
    }
    let mut pairs = Vec::new();
    for (_, (best, worst)) in by_task {
        let (success, s_rec) = &window[best];
        let (failure, _) = &window[worst];
        if success.reward - failure.reward >= margin {
            pairs.push(EvidencePair {
                success: success.clone(),
                failure: failure.clone(),
                success_credits: credits_from_lps(
                    &s_rec.per_step_forward_lp,
                    &s_rec.per_step_backward_lp,
                    0.0,
                ),
            });
        }
    }
    pairs
}

/// Run the full training loop described by the config.
pub fn run_training(
    config: &RunConfig,
    workers: usize,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    config.validate()?;
    let env = config.environment()?;
    let mut library = config.library()?;
    let mut params = config.policy(&env);
    let ttb = config.ttb_config();
    let thresholds = config.thresholds();
    let mut sinks = Sinks::at(out_dir)?;
    let mut opt = OptState::new();

    let mut metrics_log: Vec<StepMetrics> = Vec::with_capacity(config.max_steps);
    let mut boundaries: Vec<CurationEvent> = Vec::new();
    let mut loss_history: Vec<f64> = Vec::new();
    // Ring of the most recent W batches, the curation evidence window.
    let mut recent: Vec<(Trajectory, ResidualRecord)> = Vec::new();
    let recent_cap = ttb.window_w * ttb.tasks_per_batch * ttb.trajectories_per_task;
    let mut max_grad_delta_norm: f64 = 0.0;
    let mut min_length_seen = usize::MAX;

    for step in 0..config.max_steps {
        let batch = collect_batch(&env, &library, &params, &ttb, config.seed, step, workers)?;

        let (mut m, records) = match config.algorithm {
            Algorithm::Ttb => train_step(&env, &library, &batch, &mut params, &ttb, &mut opt)?,
            Algorithm::Reinforce => {
                let m = reinforce_step(&env, &library, &batch, &mut params, &ttb, &mut opt)?;
                let recs = residuals_for_logging(&env, &library, &batch, &params, &ttb)?;
                (m, recs)
            }
            Algorithm::Grpo => {
                let m = grpo_step(&env, &library, &batch, &mut params, &ttb, &mut opt)?;
                let recs = residuals_for_logging(&env, &library, &batch, &params, &ttb)?;
                (m, recs)
            }
        };

        if config.algorithm == Algorithm::Ttb {
            // Self-annealing guard: every per-trajectory gradient obeys
            // the (2|delta| / T_min^2) * G bound.
            max_grad_delta_norm = max_grad_delta_norm.max(m.max_grad_delta_norm);
            min_length_seen = min_length_seen.min(m.min_length);
            let bound = 2.0 * m.max_abs_delta
                / (min_length_seen * min_length_seen) as f64
                * max_grad_delta_norm;
            if m.max_traj_grad_norm > bound + 1e-9 {
                return Err(Error::Config(format!(
                    "self-annealing bound violated at step {step}: {} > {}",
                    m.max_traj_grad_norm, bound
                )));
            }
        }

        loss_history.push(m.loss);
        for (tau, rec) in batch.iter().zip(&records) {
            if let Some(w) = sinks.trajectories.as_mut() {
                let logz = params.log_partition(&tau.history.task_id)?;
                serde_json::to_writer(&mut *w, &TrajRecord::new(step, tau, rec, logz))?;
                writeln!(w)?;
            }
        }
        recent.extend(batch.into_iter().zip(records));
        if recent.len() > recent_cap {
            let drop = recent.len() - recent_cap;
            recent.drain(..drop);
        }

        // Plateau check fires curation at most once per step.
        let mut plateau = false;
        if config.curation_enabled
            && config.algorithm == Algorithm::Ttb
            && plateau_detect(&loss_history, &ttb).unwrap_or(false)
        {
            plateau = true;
            let visits = collect_skill_visits(&recent);
            let mut lambda1s = Vec::new();
            for v in visits.values() {
                lambda1s.push(crate::diagnostics::cgf_grouped(v, 1.0)?);
            }
            let mean_lambda1 = if lambda1s.is_empty() {
                0.0
            } else {
                lambda1s.iter().sum::<f64>() / lambda1s.len() as f64
            };
            let mut stats = BTreeMap::new();
            for (id, v) in &visits {
                stats.insert(id.clone(), crate::diagnostics::cgf_summaries(v, mean_lambda1)?);
            }
            let pairs = build_pairs(&recent, thresholds.pair_margin);
            let (next_library, mut event) = curate(&library, &stats, &pairs, &thresholds)?;
            event.step = step;
            if let Some(w) = sinks.curation.as_mut() {
                serde_json::to_writer(&mut *w, &event)?;
                writeln!(w)?;
            }
            boundaries.push(event);
            library = next_library;
            phase_transition(&mut params, &mut loss_history, config.logz_reset());
            opt.reset();
            recent.clear();
        }

        let root = env.reset(&env.tasks[0])?;
        let entropy = params.flow_entropy(&env, &library, &root)?;
        let logz_mean = {
            let (n, total) = params.tasks().fold((0usize, 0.0), |(n, s), (_, v)| (n + 1, s + v));
            total / n as f64
        };
        let row = StepMetrics {
            step,
            loss_ttb: m.loss,
            mean_reward: m.mean_reward,
            mean_abs_delta: m.mean_abs_delta,
            flow_entropy: entropy,
            logz_mean,
            library_size: library.len(),
            grad_norm_theta: m.grad_norm_theta,
            grad_norm_phi: m.grad_norm_phi,
            plateau_flag: plateau,
            grad_variance: m.grad_variance,
        };
        m.loss = row.loss_ttb;
        if let Some(w) = sinks.metrics.as_mut() {
            writeln!(w, "{}", row.csv_row())?;
        }
        metrics_log.push(row);
    }

    if let Some(d) = out_dir {
        let mut w = BufWriter::new(File::create(d.join("checkpoint.txt"))?);
        params.save_checkpoint(&mut w)?;
    }
    Ok(RunOutcome { metrics: metrics_log, boundaries, params, library, env })
}

fn residuals_for_logging(
    env: &Environment,
    library: &SkillLibrary,
    batch: &[Trajectory],
    params: &PolicyParams,
    ttb: &TtbConfig,
) -> Result<Vec<ResidualRecord>> {
    batch.iter().map(|t| crate::trainer::ttb_residual(env, library, t, params, ttb)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> RunConfig {
        RunConfig::from_str(text).unwrap()
    }

    const SMALL: &str = r#"
alphabet = "AB"
goals = [["AB", 1.0]]
horizon = 2
window_fwd = 2
seed = 7
max_steps = 25
lr = 0.3
kl_coeff = 0.0
tasks_per_batch = 1
trajectories_per_task = 8
curation_enabled = false
"#;

    #[test]
    fn training_runs_and_reduces_loss() {
        let cfg = config(SMALL);
        let out = run_training(&cfg, 1, None).unwrap();
        assert_eq!(out.metrics.len(), 25);
        let first = out.metrics.first().unwrap().loss_ttb;
        let last = out.metrics.last().unwrap().loss_ttb;
        assert!(last < first, "loss did not go down: {first} -> {last}");
    }

    #[test]
    fn worker_counts_agree_exactly() {
        let cfg = config(SMALL);
        let a = run_training(&cfg, 1, None).unwrap();
        let b = run_training(&cfg, 4, None).unwrap();
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.csv_row(), y.csv_row());
        }
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_steps_writes_headers_only() {
        let cfg = config(&SMALL.replace("max_steps = 25", "max_steps = 0"));
        let dir = tempfile::tempdir().unwrap();
        run_training(&cfg, 1, Some(dir.path())).unwrap();
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.trim(), METRICS_HEADER);
        let traj = std::fs::read_to_string(dir.path().join("trajectories.jsonl")).unwrap();
        assert!(traj.is_empty());
    }

    #[test]
    fn skill_visits_are_grouped_by_trajectory() {
        let cfg = config(&SMALL.replace(
            "goals = [[\"AB\", 1.0]]",
            "goals = [[\"ABAB\", 1.0]]\ninitial_skills = [\"AB\"]",
        ));
        let cfg = RunConfig { horizon: 4, ..cfg };
        let env = cfg.environment().unwrap();
        let lib = cfg.library().unwrap();
        let params = cfg.policy(&env);
        let ttb = cfg.ttb_config();
        let batch = collect_batch(&env, &lib, &params, &ttb, 3, 0, 1).unwrap();
        let records = residuals_for_logging(&env, &lib, &batch, &params, &ttb).unwrap();
        let log: Vec<_> = batch.into_iter().zip(records).collect();
        let visits = collect_skill_visits(&log);
        for (tau, rec) in &log {
            let skill_steps: Vec<usize> = tau
                .history
                .steps
                .iter()
                .enumerate()
                .filter(|(_, s)| s.action.kind == ActionKind::Skill)
                .map(|(i, _)| i)
                .collect();
            if skill_steps.is_empty() {
                continue;
            }
            let v = visits.get("s0").expect("s0 seen in batch");
            assert!(v.visit_count() >= skill_steps.len());
            // X at a visit equals the cumulative sum of log-importances.
            let mut x = 0.0;
            for (i, _) in tau.history.steps.iter().enumerate() {
                x += rec.per_step_forward_lp[i] - rec.per_step_backward_lp[i];
                if skill_steps.contains(&i) {
                    assert!(v.flat().iter().any(|f| (f - x).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn diagnostics_do_not_touch_policy_tables() {
        let cfg = config(SMALL);
        let env = cfg.environment().unwrap();
        let lib = cfg.library().unwrap();
        let params = cfg.policy(&env);
        let ttb = cfg.ttb_config();
        let batch = collect_batch(&env, &lib, &params, &ttb, 3, 0, 1).unwrap();
        let records = residuals_for_logging(&env, &lib, &batch, &params, &ttb).unwrap();
        let log: Vec<_> = batch.into_iter().zip(records).collect();

        let before = params.eval_count();
        let visits = collect_skill_visits(&log);
        for v in visits.values() {
            let _ = crate::diagnostics::cgf_summaries(v, 0.0);
        }
        for (_, rec) in &log {
            let _ = credits_from_lps(&rec.per_step_forward_lp, &rec.per_step_backward_lp, -2.3);
        }
        let _ = build_pairs(&log, 0.5);
        assert_eq!(params.eval_count(), before);
    }
}
