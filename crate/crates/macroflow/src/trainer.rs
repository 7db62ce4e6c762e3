//! The tempered trajectory-balance loss and its optimizers.
//!
//! The residual of one trajectory is
//! `delta = log Z(q) + sum_t fwd(t) - beta * log(R + eps) - sum_t bwd(t)`
//! with per-token-averaged edge log-probabilities, and the loss is the
//! squared length-normalized residual `(delta / T)^2`. Gradients are
//! analytic through the tabular softmaxes; the `2 delta / T^2` prefactor
//! anneals every gradient as the residual closes. REINFORCE and a
//! group-relative variant train the same tables from raw rewards, for
//! variance and mode-collapse contrast.

use std::collections::BTreeMap;

use crate::env::{Environment, Trajectory};
use crate::library::SkillLibrary;
use crate::policy::{PolicyParams, SoftmaxEval, Token};
use crate::{Error, Result};

const TINY_STD: f64 = 1e-8;

/// TTB hyperparameters. Defaults follow the reference run: `beta` 1.0,
/// `eps_min` 0.1, learning rate 1e-4, gradient clip 3.0, KL coefficient
/// 0.01, batches of 7 tasks x 4 trajectories.
#[derive(Debug, Clone)]
pub struct TtbConfig {
    pub beta: f64,
    pub eps_min: f64,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub lr_z: f64,
    pub grad_clip: f64,
    pub kl_coeff: f64,
    pub tasks_per_batch: usize,
    pub trajectories_per_task: usize,
    /// Sliding-window length for the plateau rule.
    pub window_w: usize,
    /// Relative-decrease tolerance `rho`.
    pub tol_rho: f64,
    /// Consecutive sub-tolerance windows required to declare a plateau.
    pub consecutive_m: usize,
    /// Freeze the backward policy (stop-gradient toggle).
    pub phi_stop_gradient: bool,
    /// Adaptive-moment optimizer instead of plain gradient descent.
    pub adaptive: bool,
}

impl Default for TtbConfig {
    fn default() -> Self {
        TtbConfig {
            beta: 1.0,
            eps_min: 0.1,
            lr_theta: 1e-4,
            lr_phi: 1e-4,
            lr_z: 1e-4,
            grad_clip: 3.0,
            kl_coeff: 0.01,
            tasks_per_batch: 7,
            trajectories_per_task: 4,
            window_w: 20,
            tol_rho: 0.02,
            consecutive_m: 3,
            phi_stop_gradient: false,
            adaptive: false,
        }
    }
}

impl TtbConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.beta <= 0.0 {
            return Err(Error::NonPositiveBeta(self.beta));
        }
        if self.eps_min <= 0.0 {
            return Err(Error::NonPositiveEpsilon(self.eps_min));
        }
        if self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        if self.kl_coeff < 0.0 {
            return bad("kl_coeff must be non-negative");
        }
        if self.tasks_per_batch == 0 || self.trajectories_per_task == 0 {
            return bad("batch dimensions must be positive");
        }
        if self.window_w == 0 || self.consecutive_m == 0 || self.tol_rho <= 0.0 {
            return bad("plateau rule needs positive W, M, rho");
        }
        Ok(())
    }
}

/// Residual breakdown of one trajectory.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ResidualRecord {
    pub delta: f64,
    pub length: usize,
    /// `(delta / length)^2`.
    pub loss: f64,
    pub per_step_forward_lp: Vec<f64>,
    pub per_step_backward_lp: Vec<f64>,
}

/// Sparse gradients for the three parameter groups.
#[derive(Debug, Clone, Default)]
pub struct GradBundle {
    pub theta: BTreeMap<(String, Token), f64>,
    pub phi: BTreeMap<(String, Token), f64>,
    pub log_z: BTreeMap<String, f64>,
}

impl GradBundle {
    fn add_entry(map: &mut BTreeMap<(String, Token), f64>, key: &str, tok: Token, v: f64) {
        *map.entry((key.to_string(), tok)).or_insert(0.0) += v;
    }

    pub fn add_scaled(&mut self, other: &GradBundle, scale: f64) {
        for ((k, t), v) in &other.theta {
            *self.theta.entry((k.clone(), *t)).or_insert(0.0) += v * scale;
        }
        for ((k, t), v) in &other.phi {
            *self.phi.entry((k.clone(), *t)).or_insert(0.0) += v * scale;
        }
        for (k, v) in &other.log_z {
            *self.log_z.entry(k.clone()).or_insert(0.0) += v * scale;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.theta.values_mut().for_each(|v| *v *= s);
        self.phi.values_mut().for_each(|v| *v *= s);
        self.log_z.values_mut().for_each(|v| *v *= s);
    }

    pub fn squared_norm(&self) -> f64 {
        self.theta.values().map(|v| v * v).sum::<f64>()
            + self.phi.values().map(|v| v * v).sum::<f64>()
            + self.log_z.values().map(|v| v * v).sum::<f64>()
    }

    pub fn group_norms(&self) -> (f64, f64, f64) {
        let n = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
        (
            n(&mut self.theta.values().copied()),
            n(&mut self.phi.values().copied()),
            n(&mut self.log_z.values().copied()),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.theta.values().chain(self.phi.values()).chain(self.log_z.values()).all(|v| v.is_finite())
    }
}

/// Per-step softmax evaluations for a whole trajectory, replayed under
/// the current parameters.
pub(crate) struct TrajectoryEvals {
    pub fwd: Vec<Vec<SoftmaxEval>>,
    pub bwd: Vec<Vec<SoftmaxEval>>,
}

pub(crate) fn evaluate_trajectory(
    env: &Environment,
    library: &SkillLibrary,
    trajectory: &Trajectory,
    params: &PolicyParams,
) -> Result<TrajectoryEvals> {
    let task = env.task(&trajectory.history.task_id)?;
    let mut h = env.reset(task)?;
    let mut fwd = Vec::with_capacity(trajectory.length());
    let mut bwd = Vec::with_capacity(trajectory.length());
    for step in &trajectory.history.steps {
        fwd.push(params.forward_evals(env, library, &step.action, &h)?);
        bwd.push(params.backward_evals(env, library, &step.action, &h, &step.obs)?);
        h = env.step(&h, &step.action, library)?.1;
    }
    Ok(TrajectoryEvals { fwd, bwd })
}

fn mean_lp(evals: &[SoftmaxEval]) -> f64 {
    evals.iter().map(|e| e.logprob()).sum::<f64>() / evals.len() as f64
}

fn residual_from_evals(
    trajectory: &Trajectory,
    evals: &TrajectoryEvals,
    log_z: f64,
    config: &TtbConfig,
) -> Result<ResidualRecord> {
    let length = trajectory.length();
    if length == 0 {
        return Err(Error::NonTerminalTrajectory);
    }
    let per_step_forward_lp: Vec<f64> = evals.fwd.iter().map(|e| mean_lp(e)).collect();
    let per_step_backward_lp: Vec<f64> = evals.bwd.iter().map(|e| mean_lp(e)).collect();
    let smoothed = crate::env::smooth_reward(trajectory.reward, config.eps_min)?;
    let delta = log_z + per_step_forward_lp.iter().sum::<f64>()
        - config.beta * smoothed.ln()
        - per_step_backward_lp.iter().sum::<f64>();
    let normalized = delta / length as f64;
    Ok(ResidualRecord {
        delta,
        length,
        loss: normalized * normalized,
        per_step_forward_lp,
        per_step_backward_lp,
    })
}

/// TTB residual of a terminal trajectory under the current parameters.
pub fn ttb_residual(
    env: &Environment,
    library: &SkillLibrary,
    trajectory: &Trajectory,
    params: &PolicyParams,
    config: &TtbConfig,
) -> Result<ResidualRecord> {
    let task = env.task(&trajectory.history.task_id)?;
    if !env.is_terminal(&trajectory.history, task) {
        return Err(Error::NonTerminalTrajectory);
    }
    let evals = evaluate_trajectory(env, library, trajectory, params)?;
    residual_from_evals(trajectory, &evals, params.log_partition(&task.id)?, config)
}

/// One trajectory's loss gradient: the residual record, the full loss
/// gradient, and the norm of the residual gradient `grad delta`.
pub struct TrajectoryGrad {
    pub record: ResidualRecord,
    pub grad: GradBundle,
    pub grad_delta_norm: f64,
}

/// Analytic TTB gradient: `grad L = (2 delta / T^2) * grad delta`, with
/// `d delta / d logZ = 1`, softmax gradients per visited context, and the
/// backward group entering with a negative sign.
pub fn grad_ttb(
    env: &Environment,
    library: &SkillLibrary,
    trajectory: &Trajectory,
    params: &PolicyParams,
    config: &TtbConfig,
) -> Result<TrajectoryGrad> {
    let task = env.task(&trajectory.history.task_id)?;
    if !env.is_terminal(&trajectory.history, task) {
        return Err(Error::NonTerminalTrajectory);
    }
    let evals = evaluate_trajectory(env, library, trajectory, params)?;
    let record = residual_from_evals(trajectory, &evals, params.log_partition(&task.id)?, config)?;
    let t_sq = (record.length * record.length) as f64;
    let coeff = 2.0 * record.delta / t_sq;

    let mut delta_grad = GradBundle::default();
    delta_grad.log_z.insert(task.id.clone(), 1.0);
    for step_evals in &evals.fwd {
        let k = step_evals.len() as f64;
        for eval in step_evals {
            for (i, &tok) in eval.legal.iter().enumerate() {
                let indicator = if i == eval.chosen { 1.0 } else { 0.0 };
                GradBundle::add_entry(
                    &mut delta_grad.theta,
                    &eval.key,
                    tok,
                    (indicator - eval.probs[i]) / k,
                );
            }
        }
    }
    if !config.phi_stop_gradient {
        for step_evals in &evals.bwd {
            let k = step_evals.len() as f64;
            for eval in step_evals {
                for (i, &tok) in eval.legal.iter().enumerate() {
                    let indicator = if i == eval.chosen { 1.0 } else { 0.0 };
                    GradBundle::add_entry(
                        &mut delta_grad.phi,
                        &eval.key,
                        tok,
                        -(indicator - eval.probs[i]) / k,
                    );
                }
            }
        }
    }
    let grad_delta_norm = delta_grad.squared_norm().sqrt();
    let mut grad = delta_grad;
    grad.scale(coeff);
    Ok(TrajectoryGrad { record, grad, grad_delta_norm })
}

/// Adaptive-moment state, used only when `TtbConfig::adaptive` is set.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    step: u64,
    m_theta: BTreeMap<(String, Token), (f64, f64)>,
    m_phi: BTreeMap<(String, Token), (f64, f64)>,
    m_z: BTreeMap<String, (f64, f64)>,
}

impl OptState {
    pub fn new() -> Self {
        OptState::default()
    }

    pub fn reset(&mut self) {
        *self = OptState::default();
    }
}

/// Aggregate metrics of one optimizer step.
#[derive(Debug, Clone, Default)]
pub struct TrainMetrics {
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_abs_delta: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
    pub grad_norm_z: f64,
    /// Per-batch empirical variance of the per-trajectory gradients.
    pub grad_variance: f64,
    pub max_traj_grad_norm: f64,
    pub max_grad_delta_norm: f64,
    pub max_abs_delta: f64,
    pub min_length: usize,
}

fn clip_to(values: Vec<&mut f64>, clip: f64) -> f64 {
    let norm = values.iter().map(|v| **v * **v).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        for v in values {
            *v *= s;
        }
        clip
    } else {
        norm
    }
}

fn apply_bundle(
    params: &mut PolicyParams,
    bundle: &mut GradBundle,
    config: &TtbConfig,
    opt: &mut OptState,
) -> (f64, f64, f64) {
    let clip = config.grad_clip;
    let n_theta = clip_to(bundle.theta.values_mut().collect(), clip);
    let n_phi = clip_to(bundle.phi.values_mut().collect(), clip);
    let n_z = clip_to(bundle.log_z.values_mut().collect(), clip);

    if config.adaptive {
        opt.step += 1;
        let t = opt.step;
        for ((key, tok), g) in &bundle.theta {
            let step = adam_step(opt.m_theta.entry((key.clone(), *tok)).or_insert((0.0, 0.0)), *g, t);
            params.bump_forward_logit(key, *tok, -config.lr_theta * step);
        }
        for ((key, tok), g) in &bundle.phi {
            let step = adam_step(opt.m_phi.entry((key.clone(), *tok)).or_insert((0.0, 0.0)), *g, t);
            params.bump_backward_logit(key, *tok, -config.lr_phi * step);
        }
        for (task, g) in &bundle.log_z {
            let step = adam_step(opt.m_z.entry(task.clone()).or_insert((0.0, 0.0)), *g, t);
            let old = params.log_partition(task).unwrap_or(0.0);
            let _ = params.set_log_partition(task, old - config.lr_z * step);
        }
    } else {
        for ((key, tok), g) in &bundle.theta {
            params.bump_forward_logit(key, *tok, -config.lr_theta * g);
        }
        for ((key, tok), g) in &bundle.phi {
            params.bump_backward_logit(key, *tok, -config.lr_phi * g);
        }
        for (task, g) in &bundle.log_z {
            let old = params.log_partition(task).unwrap_or(0.0);
            let _ = params.set_log_partition(task, old - config.lr_z * g);
        }
    }
    (n_theta, n_phi, n_z)
}

fn adam_step(state: &mut (f64, f64), g: f64, t: u64) -> f64 {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    state.0 = B1 * state.0 + (1.0 - B1) * g;
    state.1 = B2 * state.1 + (1.0 - B2) * g * g;
    let m_hat = state.0 / (1.0 - B1.powi(t as i32));
    let v_hat = state.1 / (1.0 - B2.powi(t as i32));
    m_hat / (v_hat.sqrt() + EPS)
}

/// KL(pi || uniform) gradient over the forward contexts visited by the
/// batch, the regularizer's reference being the zero-logit policy.
fn kl_gradient(
    env: &Environment,
    library: &SkillLibrary,
    batch: &[Trajectory],
    params: &PolicyParams,
) -> Result<GradBundle> {
    let mut grad = GradBundle::default();
    for trajectory in batch {
        let evals = evaluate_trajectory(env, library, trajectory, params)?;
        for step in &evals.fwd {
            for eval in step {
                let u = 1.0 / eval.legal.len() as f64;
                let kl: f64 =
                    eval.probs.iter().map(|p| if *p > 0.0 { p * (p.ln() - u.ln()) } else { 0.0 }).sum();
                for (i, &tok) in eval.legal.iter().enumerate() {
                    let p = eval.probs[i];
                    if p > 0.0 {
                        GradBundle::add_entry(
                            &mut grad.theta,
                            &eval.key,
                            tok,
                            p * ((p.ln() - u.ln()) - kl),
                        );
                    }
                }
            }
        }
    }
    grad.scale(1.0 / batch.len() as f64);
    Ok(grad)
}

/// One TTB optimizer step over a batch: batch-averaged gradients with
/// per-group norm clipping, then a parameter update. Aborts on any
/// non-finite per-trajectory gradient.
pub fn train_step(
    env: &Environment,
    library: &SkillLibrary,
    batch: &[Trajectory],
    params: &mut PolicyParams,
    config: &TtbConfig,
    opt: &mut OptState,
) -> Result<(TrainMetrics, Vec<ResidualRecord>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut metrics = TrainMetrics { min_length: usize::MAX, ..TrainMetrics::default() };
    let mut records = Vec::with_capacity(batch.len());
    let mut mean_grad = GradBundle::default();
    let mut sum_sq_norms = 0.0;
    for (i, trajectory) in batch.iter().enumerate() {
        let tg = grad_ttb(env, library, trajectory, params, config)?;
        if !tg.grad.is_finite() || !tg.record.delta.is_finite() {
            return Err(Error::NonFiniteGradient {
                trajectory: i,
                task: trajectory.history.task_id.clone(),
            });
        }
        let norm_sq = tg.grad.squared_norm();
        sum_sq_norms += norm_sq;
        metrics.max_traj_grad_norm = metrics.max_traj_grad_norm.max(norm_sq.sqrt());
        metrics.max_grad_delta_norm = metrics.max_grad_delta_norm.max(tg.grad_delta_norm);
        metrics.max_abs_delta = metrics.max_abs_delta.max(tg.record.delta.abs());
        metrics.min_length = metrics.min_length.min(tg.record.length);
        metrics.loss += tg.record.loss;
        metrics.mean_reward += trajectory.reward;
        metrics.mean_abs_delta += tg.record.delta.abs();
        mean_grad.add_scaled(&tg.grad, 1.0 / batch.len() as f64);
        records.push(tg.record);
    }
    let b = batch.len() as f64;
    metrics.loss /= b;
    metrics.mean_reward /= b;
    metrics.mean_abs_delta /= b;
    metrics.grad_variance = (sum_sq_norms / b - mean_grad.squared_norm()).max(0.0);

    if config.kl_coeff > 0.0 {
        let kl = kl_gradient(env, library, batch, params)?;
        mean_grad.add_scaled(&kl, config.kl_coeff);
    }
    let (nt, np, nz) = apply_bundle(params, &mut mean_grad, config, opt);
    metrics.grad_norm_theta = nt;
    metrics.grad_norm_phi = np;
    metrics.grad_norm_z = nz;
    Ok((metrics, records))
}

fn policy_gradient_step(
    env: &Environment,
    library: &SkillLibrary,
    batch: &[Trajectory],
    advantages: &[f64],
    params: &mut PolicyParams,
    config: &TtbConfig,
    opt: &mut OptState,
) -> Result<TrainMetrics> {
    let mut metrics = TrainMetrics { min_length: usize::MAX, ..TrainMetrics::default() };
    let mut mean_grad = GradBundle::default();
    let mut sum_sq_norms = 0.0;
    for (i, (trajectory, adv)) in batch.iter().zip(advantages).enumerate() {
        let evals = evaluate_trajectory(env, library, trajectory, params)?;
        let mut g = GradBundle::default();
        let mut logprob = 0.0;
        for step in &evals.fwd {
            for eval in step {
                logprob += eval.logprob();
                for (j, &tok) in eval.legal.iter().enumerate() {
                    let indicator = if j == eval.chosen { 1.0 } else { 0.0 };
                    // Surrogate loss -adv * log pi, so the update ascends.
                    GradBundle::add_entry(
                        &mut g.theta,
                        &eval.key,
                        tok,
                        -adv * (indicator - eval.probs[j]),
                    );
                }
            }
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                trajectory: i,
                task: trajectory.history.task_id.clone(),
            });
        }
        metrics.loss += -adv * logprob;
        metrics.mean_reward += trajectory.reward;
        metrics.min_length = metrics.min_length.min(trajectory.length().max(1));
        let nsq = g.squared_norm();
        sum_sq_norms += nsq;
        metrics.max_traj_grad_norm = metrics.max_traj_grad_norm.max(nsq.sqrt());
        mean_grad.add_scaled(&g, 1.0 / batch.len() as f64);
    }
    let b = batch.len() as f64;
    metrics.loss /= b;
    metrics.mean_reward /= b;
    metrics.grad_variance = (sum_sq_norms / b - mean_grad.squared_norm()).max(0.0);
    let (nt, np, nz) = apply_bundle(params, &mut mean_grad, config, opt);
    metrics.grad_norm_theta = nt;
    metrics.grad_norm_phi = np;
    metrics.grad_norm_z = nz;
    Ok(metrics)
}

/// REINFORCE with a batch mean-reward baseline, on the same tabular
/// family (forward table only, raw rewards).
pub fn reinforce_step(
    env: &Environment,
    library: &SkillLibrary,
    batch: &[Trajectory],
    params: &mut PolicyParams,
    config: &TtbConfig,
    opt: &mut OptState,
) -> Result<TrainMetrics> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let baseline = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;
    let advantages: Vec<f64> = batch.iter().map(|t| t.reward - baseline).collect();
    policy_gradient_step(env, library, batch, &advantages, params, config, opt)
}

/// Group-relative policy gradient: per-task advantage
/// `(r - group mean) / (group std + tiny)`.
pub fn grpo_step(
    env: &Environment,
    library: &SkillLibrary,
    batch: &[Trajectory],
    params: &mut PolicyParams,
    config: &TtbConfig,
    opt: &mut OptState,
) -> Result<TrainMetrics> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in batch.iter().enumerate() {
        groups.entry(&t.history.task_id).or_default().push(i);
    }
    let mut advantages = vec![0.0; batch.len()];
    for (task, members) in &groups {
        if members.len() < 2 {
            return Err(Error::GroupTooSmall(task.to_string()));
        }
        let n = members.len() as f64;
        let mean = members.iter().map(|&i| batch[i].reward).sum::<f64>() / n;
        let var = members.iter().map(|&i| (batch[i].reward - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for &i in members {
            advantages[i] = (batch[i].reward - mean) / (std + TINY_STD);
        }
    }
    policy_gradient_step(env, library, batch, &advantages, params, config, opt)
}

/// Plateau rule: true iff the relative decrease of the windowed running
/// mean stays below `rho` for `M` consecutive non-overlapping windows.
pub fn plateau_detect(loss_history: &[f64], config: &TtbConfig) -> Result<bool> {
    let w = config.window_w;
    let m = config.consecutive_m;
    let need = (m + 1) * w;
    if loss_history.len() < need {
        return Err(Error::InsufficientHistory { need, have: loss_history.len() });
    }
    let mean_of = |end: usize| loss_history[end - w..end].iter().sum::<f64>() / w as f64;
    let len = loss_history.len();
    for i in 0..m {
        let cur = mean_of(len - i * w);
        let prev = mean_of(len - (i + 1) * w);
        let rel = if prev > f64::MIN_POSITIVE { (prev - cur) / prev } else { 0.0 };
        if rel >= config.tol_rho {
            return Ok(false);
        }
    }
    Ok(true)
}
