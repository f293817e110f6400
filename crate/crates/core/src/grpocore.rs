//! Group-relative policy optimization over recorded SDE trajectories.
//!
//! Advantages are normalized per timestep column across the group. The
//! surrogate is the PPO-style clipped ratio objective plus a closed-form
//! Gaussian KL to a frozen reference policy, negated so it can be minimized.

use ndarray::Array2;

use crate::advreward::RewardTable;
use crate::error::{ensure_finite, Error, Result};
use crate::flowmatch::VelocityModel;
use crate::netcore::ParamSet;
use crate::sdesim::{drift_mean, drift_velocity_jacobian, gaussian_logpdf, sigma_t, step_logprob_batch, Rollout, TrajStep};

/// Columns whose population std is at or below this map to zero advantages.
pub const EPS_STD: f64 = 1e-8;
pub const DEFAULT_EPS_CLIP: f64 = 0.2;
pub const DEFAULT_BETA: f64 = 0.004;

/// `adv[i][t]`, one row per trajectory and one column per step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AdvantageTable {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Per-column `(R - mean) / std` with the population std.
pub fn advantages(rewards: &RewardTable) -> Result<AdvantageTable> {
    let (rows, cols) = rewards.shape();
    if rows < 2 {
        return Err(Error::InvalidArgument(format!("group size must be >= 2, got {rows}")));
    }
    ensure_finite("rewards", rewards.values().iter().copied())?;
    let mut data = vec![0.0; rows * cols];
    for c in 0..cols {
        let col = rewards.column(c);
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rows as f64;
        let std = var.sqrt();
        if std <= EPS_STD {
            continue;
        }
        for (i, r) in col.iter().enumerate() {
            data[i * cols + c] = (r - mean) / std;
        }
    }
    Ok(AdvantageTable { rows, cols, data })
}

/// `exp(logp_new - logp_old)`.
pub fn ratio(logp_new: f64, logp_old: f64) -> Result<f64> {
    ensure_finite("importance ratio log-probabilities", [logp_new, logp_old])?;
    Ok((logp_new - logp_old).exp())
}

/// Importance ratio of one recorded transition between two policies.
pub fn step_ratio(step: &TrajStep, c: usize, policy: &VelocityModel, old: &VelocityModel, eta: f64, sigma_cap: f64) -> Result<f64> {
    let new = crate::sdesim::transition_logprob(step, c, policy, eta, sigma_cap)?;
    let prev = crate::sdesim::transition_logprob(step, c, old, eta, sigma_cap)?;
    ratio(new, prev)
}

/// `min(r * adv, clip(r, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_term(r: f64, adv: f64, eps_clip: f64) -> f64 {
    (r * adv).min(r.clamp(1.0 - eps_clip, 1.0 + eps_clip) * adv)
}

/// Derivative of [`clipped_term`] with respect to `r`.
fn clipped_term_grad(r: f64, adv: f64, eps_clip: f64) -> f64 {
    if r * adv <= r.clamp(1.0 - eps_clip, 1.0 + eps_clip) * adv {
        adv
    } else {
        0.0
    }
}

/// KL between two Gaussians sharing the isotropic std `noise_std`:
/// `||mean_theta - mean_ref||^2 / (2 noise_std^2)`.
pub fn kl_step(mean_theta: &[f64], mean_ref: &[f64], noise_std: f64) -> f64 {
    let sq: f64 = mean_theta.iter().zip(mean_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    sq / (2.0 * noise_std * noise_std)
}

/// Frozen generator copies used by the surrogate.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    old: VelocityModel,
    reference: VelocityModel,
}

impl PolicySnapshot {
    pub fn capture(old: &VelocityModel, reference: &VelocityModel) -> Self {
        Self {
            old: old.clone(),
            reference: reference.clone(),
        }
    }

    pub fn old(&self) -> &VelocityModel {
        &self.old
    }

    pub fn reference(&self) -> &VelocityModel {
        &self.reference
    }

    /// Same reference, new sampling policy.
    pub fn refresh_old(&self, old: &VelocityModel) -> Self {
        Self {
            old: old.clone(),
            reference: self.reference.clone(),
        }
    }
}

/// G trajectories sharing one condition and one schedule.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub condition: usize,
    pub rollout: Rollout,
    pub rewards: RewardTable,
    pub advantages: AdvantageTable,
}

impl GroupBatch {
    pub fn new(rollout: Rollout, rewards: RewardTable) -> Result<Self> {
        let g = rollout.len();
        if g < 2 {
            return Err(Error::InvalidArgument(format!("group size must be >= 2, got {g}")));
        }
        let condition = rollout.cond[0];
        if rollout.cond.iter().any(|&c| c != condition) {
            return Err(Error::InvalidArgument("group members must share one condition".into()));
        }
        if rollout.schedule.is_deterministic() {
            return Err(Error::DeterministicPolicy);
        }
        if rewards.shape() != (g, rollout.n_steps()) {
            return Err(Error::Shape(format!(
                "reward table {:?} for a group of {g} over {} steps",
                rewards.shape(),
                rollout.n_steps()
            )));
        }
        let advantages = advantages(&rewards)?;
        Ok(Self {
            condition,
            rollout,
            rewards,
            advantages,
        })
    }

    pub fn group_size(&self) -> usize {
        self.rollout.len()
    }
}

/// Loss value, parameter gradients and diagnostics of one surrogate evaluation.
#[derive(Debug, Clone)]
pub struct GrpoOutput {
    pub loss: f64,
    pub grads: ParamSet,
    /// Mean over trajectories and steps of the clipped term.
    pub surrogate: f64,
    /// Mean per-step KL to the reference.
    pub kl: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// `-(1/G) sum_i (1/T) sum_t clipped_term(r, adv) + beta * KL`, averaged over
/// groups, with gradients for `policy`.
pub fn grpo_loss(
    groups: &[GroupBatch],
    policy: &VelocityModel,
    snapshot: &PolicySnapshot,
    eps_clip: f64,
    beta: f64,
) -> Result<GrpoOutput> {
    if groups.is_empty() {
        return Err(Error::Empty("no GRPO groups".into()));
    }
    if !(eps_clip > 0.0 && eps_clip < 1.0) {
        return Err(Error::InvalidArgument(format!("eps_clip must lie in (0, 1), got {eps_clip}")));
    }
    if beta < 0.0 {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let shape = (groups[0].group_size(), groups[0].rollout.n_steps());
    if groups.iter().any(|g| (g.group_size(), g.rollout.n_steps()) != shape) {
        return Err(Error::Shape("groups differ in size or step count".into()));
    }
    let mut grads = policy.params.zeros_like();
    let (mut surrogate, mut kl_total, mut ratio_sum, mut clipped) = (0.0, 0.0, 0.0, 0usize);
    let mut n_terms = 0usize;
    let n_groups = groups.len() as f64;
    for group in groups {
        let rollout = &group.rollout;
        let schedule = &rollout.schedule;
        let g = group.group_size();
        let t_steps = rollout.n_steps();
        let weight = 1.0 / (n_groups * g as f64 * t_steps as f64);
        for (k, step) in rollout.steps.iter().enumerate() {
            let times = vec![step.t_from; g];
            let (v, trace) = policy.velocity_traced(step.x_from.view(), &times, &rollout.cond)?;
            let sigma = sigma_t(step.t_from, schedule.eta, schedule.sigma_cap)?;
            let mean = drift_mean(step.x_from.view(), &v, step.t_from, step.t_to, sigma);
            let (logp_old, _) = step_logprob_batch(step, &rollout.cond, snapshot.old(), schedule)?;
            let (_, mean_ref) = step_logprob_batch(step, &rollout.cond, snapshot.reference(), schedule)?;
            let s2 = step.noise_std * step.noise_std;
            let jac = drift_velocity_jacobian(step.t_from, step.t_to, sigma);
            let mut cot_v = Array2::zeros(v.raw_dim());
            for i in 0..g {
                let mu = mean.row(i);
                let x_to = step.x_to.row(i);
                let logp = gaussian_logpdf(
                    x_to.as_slice().expect("standard layout"),
                    mu.as_slice().expect("standard layout"),
                    step.noise_std,
                );
                let r = ratio(logp, logp_old[i])?;
                let adv = group.advantages.get(i, k);
                surrogate += clipped_term(r, adv, eps_clip);
                ratio_sum += r;
                if (r - 1.0).abs() > eps_clip {
                    clipped += 1;
                }
                let mu_ref = mean_ref.row(i);
                kl_total += kl_step(mu.as_slice().expect("standard layout"), mu_ref.as_slice().expect("standard layout"), step.noise_std);
                n_terms += 1;
                // d(-clip)/d mu = -dclip/dr * r * (x_to - mu) / s^2 ; d(beta KL)/d mu = beta (mu - mu_ref) / s^2
                let pg = -clipped_term_grad(r, adv, eps_clip) * r;
                for j in 0..v.ncols() {
                    let d_mu = (pg * (x_to[j] - mu[j]) + beta * (mu[j] - mu_ref[j])) / s2;
                    cot_v[[i, j]] = weight * jac * d_mu;
                }
            }
            let (_, step_grads) = policy.backward_velocity(&trace, cot_v.view())?;
            grads.add_scaled(&step_grads, 1.0)?;
        }
    }
    let count = n_terms as f64;
    let mean_surrogate = surrogate / count;
    let mean_kl = kl_total / count;
    let loss = -mean_surrogate + beta * mean_kl;
    ensure_finite("GRPO loss", [loss])?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("GRPO gradient {name}")));
    }
    Ok(GrpoOutput {
        loss,
        grads,
        surrogate: mean_surrogate,
        kl: mean_kl,
        mean_ratio: ratio_sum / count,
        clip_fraction: clipped as f64 / count,
    })
}
