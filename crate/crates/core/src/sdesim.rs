//! Marginal-preserving SDE rollouts for rectified flows.
//!
//! Integrating backward from noise to data with Euler-Maruyama:
//!
//! ```text
//! mean  = x - dt * [ v + sigma^2 / (2 t) * (x + (1 - t) v) ]
//! x_to  = mean + sigma * sqrt(dt) * eps
//! sigma = min(eta * sqrt(t / (1 - t)), sigma_cap)
//! ```
//!
//! with `sigma` evaluated at the left endpoint of each step. With `eta = 0`
//! every step collapses to the plain Euler ODE step.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{ensure_finite, Error, Result};
use crate::flowmatch::{standard_normal, TimeGrid, VelocityField, T_MAX, T_MIN};

/// Slack when checking that a time lies inside `[T_MIN, T_MAX]`.
const T_SLACK: f64 = 1e-12;

/// `min(eta * sqrt(t / (1 - t)), sigma_cap)` for `t` in the clamped range.
pub fn sigma_t(t: f64, eta: f64, sigma_cap: f64) -> Result<f64> {
    if !(T_MIN - T_SLACK..=T_MAX + T_SLACK).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "sigma requested at t = {t} outside [{T_MIN}, {T_MAX}]"
        )));
    }
    if eta < 0.0 || sigma_cap <= 0.0 {
        return Err(Error::InvalidArgument(format!("eta = {eta}, sigma_cap = {sigma_cap}")));
    }
    Ok((eta * (t / (1.0 - t)).sqrt()).min(sigma_cap))
}

/// Time grid plus noise level of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeSchedule {
    pub grid: TimeGrid,
    pub eta: f64,
    pub sigma_cap: f64,
}

impl SdeSchedule {
    pub fn new(grid: TimeGrid, eta: f64, sigma_cap: f64) -> Result<Self> {
        if eta < 0.0 || !eta.is_finite() {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {eta}")));
        }
        if sigma_cap <= 0.0 {
            return Err(Error::InvalidArgument(format!("sigma_cap must be > 0, got {sigma_cap}")));
        }
        let pts = grid.points();
        if pts[0] > T_MAX + T_SLACK || *pts.last().expect("len >= 2") < T_MIN - T_SLACK {
            return Err(Error::InvalidArgument(format!("grid {pts:?} leaves [{T_MIN}, {T_MAX}]")));
        }
        Ok(Self { grid, eta, sigma_cap })
    }

    /// Uniform grid from `T_MAX` to `T_MIN`.
    pub fn uniform(n_steps: usize, eta: f64, sigma_cap: f64) -> Result<Self> {
        Self::new(TimeGrid::clamped(n_steps)?, eta, sigma_cap)
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn is_deterministic(&self) -> bool {
        self.eta == 0.0
    }

    /// `(t_from, t_to)` of step `k`.
    pub fn step_times(&self, k: usize) -> (f64, f64) {
        let p = self.grid.points();
        (p[k], p[k + 1])
    }

    /// Transition standard deviation `sigma(t_from) * sqrt(dt)` of step `k`.
    pub fn noise_std(&self, k: usize) -> Result<f64> {
        let (t_from, t_to) = self.step_times(k);
        Ok(sigma_t(t_from, self.eta, self.sigma_cap)? * (t_from - t_to).sqrt())
    }
}

/// Gaussian transition mean for a batch of states sharing one step.
pub fn drift_mean(x: ArrayView2<f64>, v: &Array2<f64>, t_from: f64, t_to: f64, sigma: f64) -> Array2<f64> {
    let dt = t_from - t_to;
    let k = sigma * sigma / (2.0 * t_from);
    let mut out = x.to_owned();
    ndarray::Zip::from(&mut out)
        .and(v)
        .for_each(|o, &vi| *o -= dt * (vi + k * (*o + (1.0 - t_from) * vi)));
    out
}

/// `d mean / d v` (a scalar multiple of the identity).
pub fn drift_velocity_jacobian(t_from: f64, t_to: f64, sigma: f64) -> f64 {
    let dt = t_from - t_to;
    -dt * (1.0 + sigma * sigma / (2.0 * t_from) * (1.0 - t_from))
}

/// Log-density of `x` under `N(mean, std^2 I)`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], std: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -sq / (2.0 * std * std) - 0.5 * d * (2.0 * std::f64::consts::PI * std * std).ln()
}

/// One recorded transition of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajStep {
    pub t_from: f64,
    pub t_to: f64,
    pub x_from: Vec<f64>,
    pub drift_mean: Vec<f64>,
    pub noise_std: f64,
    pub x_to: Vec<f64>,
    /// `None` for deterministic (eta = 0) steps.
    pub logp: Option<f64>,
}

/// Full rollout of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub condition: usize,
    pub z: Vec<f64>,
    pub steps: Vec<TrajStep>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        &self.steps.last().expect("at least one step").x_to
    }
}

/// Batched transitions of every sample for one grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub t_from: f64,
    pub t_to: f64,
    pub x_from: Array2<f64>,
    pub drift_mean: Array2<f64>,
    pub noise_std: f64,
    pub x_to: Array2<f64>,
    pub logp: Option<Vec<f64>>,
}

/// Rollout of a batch of samples over a shared schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub cond: Vec<usize>,
    pub schedule: SdeSchedule,
    pub steps: Vec<StepBatch>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn initial(&self) -> &Array2<f64> {
        &self.steps[0].x_from
    }

    pub fn terminal(&self) -> &Array2<f64> {
        &self.steps.last().expect("at least one step").x_to
    }

    /// Per-sample view of sample `i`.
    pub fn trajectory(&self, i: usize) -> Trajectory {
        Trajectory {
            condition: self.cond[i],
            z: self.steps[0].x_from.row(i).to_vec(),
            steps: self
                .steps
                .iter()
                .map(|s| TrajStep {
                    t_from: s.t_from,
                    t_to: s.t_to,
                    x_from: s.x_from.row(i).to_vec(),
                    drift_mean: s.drift_mean.row(i).to_vec(),
                    noise_std: s.noise_std,
                    x_to: s.x_to.row(i).to_vec(),
                    logp: s.logp.as_ref().map(|l| l[i]),
                })
                .collect(),
        }
    }

    /// Rows `rows` of this rollout, in the given order.
    pub fn select(&self, rows: &[usize]) -> Rollout {
        let pick = |a: &Array2<f64>| a.select(ndarray::Axis(0), rows);
        Rollout {
            cond: rows.iter().map(|&i| self.cond[i]).collect(),
            schedule: self.schedule.clone(),
            steps: self
                .steps
                .iter()
                .map(|s| StepBatch {
                    t_from: s.t_from,
                    t_to: s.t_to,
                    x_from: pick(&s.x_from),
                    drift_mean: pick(&s.drift_mean),
                    noise_std: s.noise_std,
                    x_to: pick(&s.x_to),
                    logp: s.logp.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect()),
                })
                .collect(),
        }
    }
}

/// One batched Euler-Maruyama step from `t_from` to `t_to`.
pub fn sde_step_batch<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    model: &F,
    x: ArrayView2<f64>,
    t_from: f64,
    t_to: f64,
    cond: &[usize],
    eta: f64,
    sigma_cap: f64,
    rng: &mut R,
) -> Result<StepBatch> {
    if t_from <= t_to {
        return Err(Error::InvalidArgument(format!("step must go backward: {t_from} -> {t_to}")));
    }
    let n = x.nrows();
    let sigma = sigma_t(t_from, eta, sigma_cap)?;
    if t_to < T_MIN - T_SLACK {
        return Err(Error::InvalidArgument(format!("step target {t_to} below t_min")));
    }
    let v = model.velocity(x, &vec![t_from; n], cond)?;
    let mean = drift_mean(x, &v, t_from, t_to, sigma);
    ensure_finite("sde drift", mean.iter().copied())?;
    let std = sigma * (t_from - t_to).sqrt();
    let (x_to, logp) = if std > 0.0 {
        let eps = standard_normal(n, x.ncols(), rng);
        let x_to = &mean + &(eps * std);
        let logp = (0..n)
            .map(|i| {
                gaussian_logpdf(
                    x_to.row(i).as_slice().expect("standard layout"),
                    mean.row(i).as_slice().expect("standard layout"),
                    std,
                )
            })
            .collect();
        (x_to, Some(logp))
    } else {
        (mean.clone(), None)
    };
    Ok(StepBatch {
        t_from,
        t_to,
        x_from: x.to_owned(),
        drift_mean: mean,
        noise_std: std,
        x_to,
        logp,
    })
}

/// Single-sample step.
#[allow(clippy::too_many_arguments)]
pub fn sde_step<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    model: &F,
    x_t: &[f64],
    t_from: f64,
    t_to: f64,
    c: usize,
    eta: f64,
    sigma_cap: f64,
    rng: &mut R,
) -> Result<TrajStep> {
    let x = ArrayView2::from_shape((1, x_t.len()), x_t).expect("row vector");
    let b = sde_step_batch(model, x, t_from, t_to, &[c], eta, sigma_cap, rng)?;
    Ok(TrajStep {
        t_from,
        t_to,
        x_from: x_t.to_vec(),
        drift_mean: b.drift_mean.row(0).to_vec(),
        noise_std: b.noise_std,
        x_to: b.x_to.row(0).to_vec(),
        logp: b.logp.map(|l| l[0]),
    })
}

/// Roll a batch of initial states through the whole schedule.
pub fn sample_rollout<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    model: &F,
    z: ArrayView2<f64>,
    cond: &[usize],
    schedule: &SdeSchedule,
    rng: &mut R,
) -> Result<Rollout> {
    if cond.len() != z.nrows() {
        return Err(Error::Shape(format!("{} conditions for {} samples", cond.len(), z.nrows())));
    }
    let mut steps: Vec<StepBatch> = Vec::with_capacity(schedule.n_steps());
    for k in 0..schedule.n_steps() {
        let (t_from, t_to) = schedule.step_times(k);
        let x = steps.last().map(|s| s.x_to.view()).unwrap_or(z);
        let step = sde_step_batch(model, x, t_from, t_to, cond, schedule.eta, schedule.sigma_cap, rng)?;
        steps.push(step);
    }
    Ok(Rollout {
        cond: cond.to_vec(),
        schedule: schedule.clone(),
        steps,
    })
}

/// Single-sample rollout.
pub fn sample_trajectory<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    model: &F,
    z: &[f64],
    c: usize,
    schedule: &SdeSchedule,
    rng: &mut R,
) -> Result<Trajectory> {
    let zv = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
    Ok(sample_rollout(model, zv, &[c], schedule, rng)?.trajectory(0))
}

/// Log-density of the recorded `x_to` under `model`'s drift, using the
/// recorded noise level.
pub fn transition_logprob<F: VelocityField + ?Sized>(step: &TrajStep, c: usize, model: &F, eta: f64, sigma_cap: f64) -> Result<f64> {
    if eta == 0.0 || step.noise_std == 0.0 {
        return Err(Error::DeterministicPolicy);
    }
    let x = ArrayView2::from_shape((1, step.x_from.len()), &step.x_from[..]).expect("row vector");
    let v = model.velocity(x, &[step.t_from], &[c])?;
    let sigma = sigma_t(step.t_from, eta, sigma_cap)?;
    let mean = drift_mean(x, &v, step.t_from, step.t_to, sigma);
    let lp = gaussian_logpdf(&step.x_to, mean.as_slice().expect("standard layout"), step.noise_std);
    ensure_finite("transition log-probability", [lp])?;
    Ok(lp)
}

/// Batched log-densities of one recorded step's `x_to` under `model`.
/// Also returns the recomputed means.
pub fn step_logprob_batch<F: VelocityField + ?Sized>(
    step: &StepBatch,
    cond: &[usize],
    model: &F,
    schedule: &SdeSchedule,
) -> Result<(Vec<f64>, Array2<f64>)> {
    if schedule.is_deterministic() || step.noise_std == 0.0 {
        return Err(Error::DeterministicPolicy);
    }
    let n = step.x_from.nrows();
    let v = model.velocity(step.x_from.view(), &vec![step.t_from; n], cond)?;
    let sigma = sigma_t(step.t_from, schedule.eta, schedule.sigma_cap)?;
    let mean = drift_mean(step.x_from.view(), &v, step.t_from, step.t_to, sigma);
    let lp: Vec<f64> = (0..n)
        .map(|i| {
            gaussian_logpdf(
                step.x_to.row(i).as_slice().expect("standard layout"),
                mean.row(i).as_slice().expect("standard layout"),
                step.noise_std,
            )
        })
        .collect();
    ensure_finite("transition log-probability", lp.iter().copied())?;
    Ok((lp, mean))
}
