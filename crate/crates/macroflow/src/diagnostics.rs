//! Zero-cost flow diagnostics.
//!
//! Everything here consumes only quantities the loss already computed:
//! per-step forward/backward log-probabilities and the log-partition.
//! No function in this module evaluates a policy table. Step importance
//! `I(t) = exp(fwd - bwd)` equals the state-flow ratio under detailed
//! balance, telescoping it from `log Z` recovers the state flow along a
//! trajectory, and per-skill statistics of the telescoped log-flow (a
//! cumulant generating function and its summaries) rank skills for
//! curation.

use serde::Serialize;

use crate::{Error, Result};

/// Per-step credit: the importance ratio and the telescoped state flow.
#[derive(Debug, Clone, Serialize)]
pub struct StepCredit {
    pub t: usize,
    pub log_importance: f64,
    pub log_state_flow: f64,
}

/// `I(t) = exp(fwd_lp - bwd_lp)`.
pub fn step_importance(fwd_lp: f64, bwd_lp: f64) -> f64 {
    (fwd_lp - bwd_lp).exp()
}

/// Cumulative log state flow along a trajectory, anchored at `log Z`.
pub fn telescope_log_flow(log_importances: &[f64], log_z: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(log_importances.len());
    let mut acc = log_z;
    for li in log_importances {
        acc += li;
        out.push(acc);
    }
    out
}

/// Credits for one trajectory from its logged per-step log-probabilities.
pub fn credits_from_lps(fwd_lps: &[f64], bwd_lps: &[f64], log_z: f64) -> Vec<StepCredit> {
    let lis: Vec<f64> = fwd_lps.iter().zip(bwd_lps).map(|(f, b)| f - b).collect();
    let flows = telescope_log_flow(&lis, log_z);
    lis.into_iter()
        .zip(flows)
        .enumerate()
        .map(|(t, (li, lf))| StepCredit { t, log_importance: li, log_state_flow: lf })
        .collect()
}

/// Visits of one skill, grouped by trajectory. Each visit records the
/// telescoped log-flow share `X_v = sum_{t' <= t} log I(t')` at the
/// invoking step; the anchor `log Z` is kept separate so that centered
/// statistics cancel it.
#[derive(Debug, Clone, Default)]
pub struct SkillVisits {
    pub skill_id: String,
    pub per_trajectory: Vec<Vec<f64>>,
}

impl SkillVisits {
    pub fn flat(&self) -> Vec<f64> {
        self.per_trajectory.iter().flatten().copied().collect()
    }

    pub fn trajectory_count(&self) -> usize {
        self.per_trajectory.len()
    }

    pub fn visit_count(&self) -> usize {
        self.per_trajectory.iter().map(|v| v.len()).sum()
    }

    pub fn atomic(skill_id: impl Into<String>, visits: &[f64]) -> Self {
        SkillVisits {
            skill_id: skill_id.into(),
            per_trajectory: visits.iter().map(|&x| vec![x]).collect(),
        }
    }
}

/// Log-mean-exp over a flat visit set: `log(mean(exp(lambda X)))`.
/// Max-shifted; exact zero at `lambda = 0`.
pub fn cgf(visit_log_flows: &[f64], lambda: f64) -> Result<f64> {
    if visit_log_flows.is_empty() {
        return Err(Error::EmptyVisits);
    }
    Ok(log_mean_exp_weighted(visit_log_flows, lambda, visit_log_flows.len() as f64))
}

/// The per-skill CGF with the trajectory-count denominator: visits of a
/// trajectory sum inside the mean, so a skill invoked twice in one
/// trajectory contributes both visits over a single count.
pub fn cgf_grouped(visits: &SkillVisits, lambda: f64) -> Result<f64> {
    if visits.visit_count() == 0 {
        return Err(Error::NoVisits(visits.skill_id.clone()));
    }
    Ok(log_mean_exp_weighted(&visits.flat(), lambda, visits.trajectory_count() as f64))
}

fn log_mean_exp_weighted(xs: &[f64], lambda: f64, denom: f64) -> f64 {
    let scaled: Vec<f64> = xs.iter().map(|x| lambda * x).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let total: f64 = crate::oracle::kahan_sum(scaled.iter().map(|s| (s - m).exp()));
    m + (total / denom).ln()
}

/// Linear-space mean of the state flow over a skill's visits:
/// `exp(log Z) * mean(exp(X_v))`, computed via a max-shifted
/// log-sum-exp. Errors on zero visits, which is "no data", not low flow.
pub fn skill_marginal_flow(visits: &SkillVisits, log_z: f64) -> Result<f64> {
    let lambda1 = cgf_grouped(visits, 1.0)?;
    Ok((log_z + lambda1).exp())
}

/// Summary statistics driving curation decisions.
#[derive(Debug, Clone, Serialize)]
pub struct SkillStats {
    pub skill_id: String,
    pub visit_log_flows: Vec<f64>,
    /// Mean log-flow `G`: the CGF derivative at zero.
    pub g: f64,
    /// CGF at one: `log F_hat - log Z`.
    pub lambda1: f64,
    /// `lambda1` minus the library mean of `lambda1`.
    pub centered_share: f64,
    /// `lambda1 - g`, non-negative by Jensen.
    pub jensen_gap: f64,
    /// Empirical cumulants `kappa_2 .. kappa_6` of the visit log-flows.
    pub cumulants: [f64; 5],
    pub trajectory_count: usize,
}

/// Compute `SkillStats` from a visit set and the library mean of the
/// CGF at one.
pub fn cgf_summaries(visits: &SkillVisits, library_lambda1_mean: f64) -> Result<SkillStats> {
    let flat = visits.flat();
    if flat.is_empty() {
        return Err(Error::NoVisits(visits.skill_id.clone()));
    }
    let g = flat.iter().sum::<f64>() / flat.len() as f64;
    let lambda1 = cgf_grouped(visits, 1.0)?;
    let mut gap = lambda1 - g;
    debug_assert!(gap >= -1e-12, "Jensen gap below tolerance: {gap}");
    if gap < 0.0 && gap >= -1e-12 {
        gap = 0.0;
    }
    Ok(SkillStats {
        skill_id: visits.skill_id.clone(),
        g,
        lambda1,
        centered_share: lambda1 - library_lambda1_mean,
        jensen_gap: gap,
        cumulants: cumulants_2_to_6(&flat),
        trajectory_count: visits.trajectory_count(),
        visit_log_flows: flat,
    })
}

/// Empirical cumulants from central moments (population normalization).
pub fn cumulants_2_to_6(xs: &[f64]) -> [f64; 5] {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let moment = |k: i32| xs.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / n;
    let m2 = moment(2);
    let m3 = moment(3);
    let m4 = moment(4);
    let m5 = moment(5);
    let m6 = moment(6);
    [
        m2,
        m3,
        m4 - 3.0 * m2 * m2,
        m5 - 10.0 * m3 * m2,
        m6 - 15.0 * m4 * m2 - 10.0 * m3 * m3 + 30.0 * m2 * m2 * m2,
    ]
}

/// Truncated expansion of the Jensen gap: `sum_{k=2..6} kappa_k / k!`.
pub fn truncated_cumulant_gap(cumulants: &[f64; 5]) -> f64 {
    let factorials = [2.0, 6.0, 24.0, 120.0, 720.0];
    cumulants.iter().zip(factorials).map(|(k, f)| k / f).sum()
}
