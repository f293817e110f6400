//! Sample-quality metrics, toy proxy rewards and the ablation harness.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::advreward::{d_score, RewardTable};
use crate::error::{Error, Result};
use crate::flowmatch::{ode_sample, sample_target, standard_normal, MixtureTarget, TimeGrid, VelocityModel};
use crate::rngs;
use crate::sdesim::Rollout;
use crate::trainer::{self, SimMode, TrainConfig, TrainState, Variant};

/// Bandwidth multipliers applied to the median pairwise distance.
pub const BANDWIDTH_MULTIPLIERS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
/// Largest set size solved by exact assignment.
pub const EXACT_W2_LIMIT: usize = 512;
pub const SLICED_PROJECTIONS: usize = 128;
pub const SLICED_SEED: u64 = 0x5eed_0f_51_1ce5;
/// Coverage radius in units of the component std.
pub const COVERAGE_RADIUS_STDS: f64 = 3.0;
pub const COVERAGE_MIN_COUNT: usize = 5;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(x: ArrayView2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn kernel_sum(d2: f64, inv_two_s2: &[f64]) -> f64 {
    inv_two_s2.iter().map(|k| (-d2 * k).exp()).sum()
}

/// Biased (V-statistic) squared MMD with `k(a, b) = sum_s exp(-|a-b|^2 / (2 s^2))`.
pub fn mmd2(x: ArrayView2<f64>, y: ArrayView2<f64>, bandwidths: &[f64]) -> Result<f64> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::Empty("MMD needs two non-empty sets".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!("MMD sets of dimension {} and {}", x.ncols(), y.ncols())));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument(format!("bandwidths {bandwidths:?}")));
    }
    let k: Vec<f64> = bandwidths.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
    let (xr, yr) = (rows(x), rows(y));
    let within = |set: &[Vec<f64>]| {
        let n = set.len();
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += kernel_sum(sq_dist(&set[i], &set[j]), &k);
            }
        }
        (2.0 * off + n as f64 * k.len() as f64) / (n * n) as f64
    };
    let mut cross = 0.0;
    for a in &xr {
        for b in &yr {
            cross += kernel_sum(sq_dist(a, b), &k);
        }
    }
    let cross = cross / (xr.len() * yr.len()) as f64;
    Ok((within(&xr) + within(&yr) - 2.0 * cross).max(0.0))
}

/// Median of all pairwise distances within a set.
pub fn median_pairwise_distance(x: ArrayView2<f64>) -> Result<f64> {
    let xr = rows(x);
    if xr.len() < 2 {
        return Err(Error::Empty("median distance needs two points".into()));
    }
    let mut d = Vec::with_capacity(xr.len() * (xr.len() - 1) / 2);
    for i in 0..xr.len() {
        for j in i + 1..xr.len() {
            d.push(sq_dist(&xr[i], &xr[j]).sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(*m)
}

/// Median-heuristic bandwidths taken from the reference set.
pub fn default_bandwidths(reference: ArrayView2<f64>) -> Result<Vec<f64>> {
    let med = median_pairwise_distance(reference)?;
    Ok(BANDWIDTH_MULTIPLIERS.iter().map(|m| m * med).collect())
}

/// MMD^2 with bandwidths from the reference (second) set.
pub fn mmd2_against(samples: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64> {
    let bw = default_bandwidths(reference)?;
    mmd2(samples, reference, &bw)
}

/// Minimum-cost perfect matching of a square cost matrix (row-major);
/// returns the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // potentials u (rows), v (cols); p[j] = row matched to column j, 1-based
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Exact 2-Wasserstein distance between equal-size point sets.
pub fn wasserstein2_exact(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    check_pair(x, y)?;
    let (xr, yr) = (rows(x), rows(y));
    let n = xr.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = sq_dist(&xr[i], &yr[j]);
        }
    }
    let assign = hungarian(&cost, n);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).sqrt())
}

/// Sliced estimate `sqrt(d * mean_theta W2^2(theta.x, theta.y))` over random
/// unit directions. The factor `d` makes it exact for pure translations.
pub fn wasserstein2_sliced(x: ArrayView2<f64>, y: ArrayView2<f64>, projections: usize, seed: u64) -> Result<f64> {
    check_pair(x, y)?;
    if projections == 0 {
        return Err(Error::InvalidArgument("sliced W2 needs at least one projection".into()));
    }
    let d = x.ncols();
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..d).map(|_| rngs::normal(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |m: ArrayView2<f64>| {
            let mut p: Vec<f64> = m.rows().into_iter().map(|r| r.iter().zip(&dir).map(|(a, b)| a * b).sum()).collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (px, py) = (project(x), project(y));
        acc += px.iter().zip(&py).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
    }
    Ok((d as f64 * acc / projections as f64).sqrt())
}

/// Exact assignment up to [`EXACT_W2_LIMIT`] points, sliced above.
pub fn wasserstein2(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() <= EXACT_W2_LIMIT {
        wasserstein2_exact(x, y)
    } else {
        wasserstein2_sliced(x, y, SLICED_PROJECTIONS, SLICED_SEED)
    }
}

fn check_pair(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!("W2 needs equal-size sets, got {} and {}", x.nrows(), y.nrows())));
    }
    if x.nrows() == 0 {
        return Err(Error::Empty("W2 of empty sets".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Shape("W2 sets differ in dimension".into()));
    }
    Ok(())
}

/// Fraction of mixture components with at least `min_count` samples within
/// `radius` of the component mean.
pub fn mode_coverage(x: ArrayView2<f64>, target: &MixtureTarget, radius: f64, min_count: usize) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("coverage radius must be > 0, got {radius}")));
    }
    let r2 = radius * radius;
    let covered = target
        .means
        .iter()
        .filter(|m| x.rows().into_iter().filter(|row| sq_dist(row.as_slice().expect("standard layout"), m) <= r2).count() >= min_count)
        .count();
    Ok(covered as f64 / target.n_components() as f64)
}

/// Fixed toy reward with values in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProxyReward {
    /// `exp(-|x - mu_mode|^2 / tau)`.
    ModePull { mode: usize, tau: f64 },
    /// `exp(-|x|^2 / scale)`.
    NormPenalty { scale: f64 },
}

impl Default for ProxyReward {
    fn default() -> Self {
        ProxyReward::ModePull { mode: 0, tau: 8.0 }
    }
}

impl ProxyReward {
    pub fn validate(&self) -> Result<()> {
        let p = match *self {
            ProxyReward::ModePull { tau, .. } => tau,
            ProxyReward::NormPenalty { scale } => scale,
        };
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::Config(format!("proxy reward parameter must be > 0, got {p}")));
        }
        Ok(())
    }

    pub fn score(&self, x: &[f64], target: &MixtureTarget) -> Result<f64> {
        match *self {
            ProxyReward::ModePull { mode, tau } => {
                let mu = target
                    .means
                    .get(mode)
                    .ok_or_else(|| Error::InvalidArgument(format!("proxy mode {mode} out of range")))?;
                Ok((-sq_dist(x, mu) / tau).exp())
            }
            ProxyReward::NormPenalty { scale } => Ok((-x.iter().map(|v| v * v).sum::<f64>() / scale).exp()),
        }
    }

    pub fn score_rows(&self, x: ArrayView2<f64>, target: &MixtureTarget) -> Result<Vec<f64>> {
        x.rows()
            .into_iter()
            .map(|r| self.score(r.as_slice().expect("standard layout"), target))
            .collect()
    }
}

/// Proxy reward of every intermediate state, same layout as
/// [`crate::advreward::stepwise_rewards`].
pub fn proxy_reward_table(proxy: &ProxyReward, target: &MixtureTarget, group: &Rollout) -> Result<RewardTable> {
    let (g, n_steps) = (group.len(), group.n_steps());
    if g == 0 {
        return Err(Error::Empty("reward group".into()));
    }
    let mut data = vec![0.0; g * n_steps];
    for (k, step) in group.steps.iter().enumerate() {
        for (i, r) in proxy.score_rows(step.x_to.view(), target)?.into_iter().enumerate() {
            data[i * n_steps + k] = r;
        }
    }
    RewardTable::new(g, n_steps, data)
}

/// Null distribution of target-vs-target MMD^2 at a given sample size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBand {
    pub mean: f64,
    pub std: f64,
    pub resamples: usize,
}

impl CalibrationBand {
    /// `mean + 3 std`.
    pub fn width(&self) -> f64 {
        self.mean + 3.0 * self.std
    }
}

/// MMD^2 between independent target draws of size `n`, `resamples` times.
pub fn calibration_band<R: Rng + ?Sized>(target: &MixtureTarget, n: usize, resamples: usize, rng: &mut R) -> Result<CalibrationBand> {
    if resamples < 2 {
        return Err(Error::InvalidArgument("calibration needs at least two resamples".into()));
    }
    let vals: Vec<f64> = (0..resamples)
        .map(|_| {
            let (a, _) = sample_target(target, n, rng);
            let (b, _) = sample_target(target, n, rng);
            mmd2_against(a.view(), b.view())
        })
        .collect::<Result<_>>()?;
    let mean = vals.iter().sum::<f64>() / resamples as f64;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / resamples as f64).sqrt();
    Ok(CalibrationBand { mean, std, resamples })
}

/// Quality of one sample set against the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub seed: u64,
    pub n_samples: usize,
    pub mmd2: f64,
    pub w2: f64,
    pub mode_coverage: f64,
    pub mean_reward: f64,
}

/// Metrics of `samples` against an equal-size `reference` drawn from `target`.
pub fn report(
    variant: &str,
    seed: u64,
    samples: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    target: &MixtureTarget,
    mean_reward: f64,
) -> Result<MetricReport> {
    Ok(MetricReport {
        variant: variant.to_string(),
        seed,
        n_samples: samples.nrows(),
        mmd2: mmd2_against(samples, reference)?,
        w2: wasserstein2(samples, reference)?,
        mode_coverage: mode_coverage(samples, target, COVERAGE_RADIUS_STDS * target.std, COVERAGE_MIN_COUNT)?,
        mean_reward,
    })
}

/// The per-seed evaluation reference set.
pub fn reference_set(target: &MixtureTarget, n: usize, seed: u64) -> Array2<f64> {
    sample_target(target, n, &mut rngs::stream(seed, "eval/reference")).0
}

/// Fixed evaluation inputs for one seed: noise, conditions and a target
/// reference set of the same size.
#[derive(Debug, Clone)]
pub struct EvalInputs {
    pub z: Array2<f64>,
    pub cond: Vec<usize>,
    pub reference: Array2<f64>,
}

impl EvalInputs {
    pub fn new(target: &MixtureTarget, n: usize, seed: u64) -> Self {
        let mut rng = rngs::stream(seed, "eval/noise");
        let cond = target.sample_conditions(n, &mut rng);
        let z = standard_normal(n, target.dim(), &mut rng);
        EvalInputs { z, cond, reference: reference_set(target, n, seed) }
    }
}

/// Teacher samples with `teacher_eval_steps` guided ODE steps.
pub fn teacher_samples(teacher: &VelocityModel, cfg: &TrainConfig, inputs: &EvalInputs) -> Result<Array2<f64>> {
    let grid = TimeGrid::uniform(cfg.t_max, cfg.t_min, cfg.teacher_eval_steps)?;
    Ok(ode_sample(teacher, inputs.z.view(), &inputs.cond, &grid, cfg.w_cfg)?.final_state().clone())
}

pub fn teacher_report(teacher: &VelocityModel, cfg: &TrainConfig, seed: u64) -> Result<MetricReport> {
    let target = cfg.target_dist()?;
    let inputs = EvalInputs::new(&target, cfg.eval_samples, seed);
    let x = teacher_samples(teacher, cfg, &inputs)?;
    let mean_reward = cfg.proxy.score_rows(x.view(), &target)?.iter().sum::<f64>() / x.nrows() as f64;
    report("teacher", seed, x.view(), inputs.reference.view(), &target, mean_reward)
}

/// Mean reward of final samples: the proxy for the fixed-reward variant,
/// the discriminator at `t_min` otherwise.
pub fn mean_reward(state: &TrainState, x: ArrayView2<f64>, cond: &[usize]) -> Result<f64> {
    let r = match state.config.variant {
        Variant::GrpoFixed => state.config.proxy.score_rows(x, &state.target)?,
        _ => d_score(&state.disc, &state.fake, x, &vec![state.config.t_min; x.nrows()], cond)?,
    };
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Report for a trained student, labelled `label`.
pub fn student_report(state: &TrainState, label: &str) -> Result<MetricReport> {
    let cfg = &state.config;
    let inputs = EvalInputs::new(&state.target, cfg.eval_samples, cfg.seed);
    let x = state.sample(inputs.z.view(), &inputs.cond)?;
    let reward = mean_reward(state, x.view(), &inputs.cond)?;
    report(label, cfg.seed, x.view(), inputs.reference.view(), &state.target, reward)
}

/// One cell of an ablation: a variant under a simulation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arm {
    pub variant: Variant,
    pub sim: SimMode,
}

impl Arm {
    pub fn label(&self) -> String {
        format!("{}/{}", self.variant.as_str(), self.sim.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationMatrix {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
}

impl AblationMatrix {
    /// {ode, sde} x {dmd2, advdmd} over seeds `0..n_seeds`.
    pub fn default_matrix(n_seeds: u64) -> Self {
        let mut arms = Vec::new();
        for sim in [SimMode::Ode, SimMode::Sde] {
            for variant in [Variant::Dmd2, Variant::Advdmd] {
                arms.push(Arm { variant, sim });
            }
        }
        AblationMatrix { arms, seeds: (0..n_seeds).collect() }
    }

    pub fn by_name(name: &str, n_seeds: u64) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_matrix(n_seeds)),
            "reward-hacking" => Ok(AblationMatrix {
                arms: [Variant::GrpoFixed, Variant::Advdmd]
                    .into_iter()
                    .map(|variant| Arm { variant, sim: SimMode::Sde })
                    .collect(),
                seeds: (0..n_seeds).collect(),
            }),
            other => Err(Error::InvalidArgument(format!("unknown ablation matrix `{other}` (default, reward-hacking)"))),
        }
    }

    pub fn cells(&self) -> Vec<(Arm, u64)> {
        self.arms.iter().flat_map(|a| self.seeds.iter().map(move |s| (*a, *s))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub steps: usize,
    /// `Err` holds the failure message of a cell that did not finish.
    pub outcome: std::result::Result<MetricReport, String>,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub finished: usize,
    pub mmd2: f64,
    pub w2: f64,
    pub coverage: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: &str = "variant,seed,steps,mmd2,w2,coverage,mean_reward,runtime_s";

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

impl AblationTable {
    pub fn reports_for(&self, arm: Arm) -> Vec<&MetricReport> {
        self.rows.iter().filter(|r| r.arm == arm).filter_map(|r| r.outcome.as_ref().ok()).collect()
    }

    /// Median over finished seeds, one row per arm in matrix order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut arms: Vec<Arm> = Vec::new();
        for r in &self.rows {
            if !arms.contains(&r.arm) {
                arms.push(r.arm);
            }
        }
        arms.into_iter()
            .map(|arm| {
                let reps = self.reports_for(arm);
                let col = |f: fn(&MetricReport) -> f64| median(reps.iter().map(|r| f(r)).collect());
                SummaryRow {
                    label: arm.label(),
                    finished: reps.len(),
                    mmd2: col(|r| r.mmd2),
                    w2: col(|r| r.w2),
                    coverage: col(|r| r.mode_coverage),
                    mean_reward: col(|r| r.mean_reward),
                }
            })
            .collect()
    }

    pub fn median_mmd2(&self, arm: Arm) -> f64 {
        median(self.reports_for(arm).iter().map(|r| r.mmd2).collect())
    }

    /// One row per cell; failed cells keep their keys and leave metrics empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{ABLATION_HEADER}")?;
        for r in &self.rows {
            match &r.outcome {
                Ok(m) => writeln!(
                    out,
                    "{},{},{},{},{},{},{},{:.3}",
                    r.arm.label(),
                    r.seed,
                    r.steps,
                    m.mmd2,
                    m.w2,
                    m.mode_coverage,
                    m.mean_reward,
                    r.runtime_s
                )?,
                Err(_) => writeln!(out, "{},{},{},,,,,{:.3}", r.arm.label(), r.seed, r.steps, r.runtime_s)?,
            }
        }
        Ok(())
    }

    /// Per-arm medians, `seed` column set to `median`.
    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{ABLATION_HEADER}")?;
        let steps = self.rows.first().map_or(0, |r| r.steps);
        for s in self.summary() {
            writeln!(out, "{},median,{},{},{},{},{},", s.label, steps, s.mmd2, s.w2, s.coverage, s.mean_reward)?;
        }
        Ok(())
    }

    pub fn failures(&self) -> Vec<(String, u64, &str)> {
        self.rows
            .iter()
            .filter_map(|r| r.outcome.as_ref().err().map(|e| (r.arm.label(), r.seed, e.as_str())))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

fn run_cell(base: &TrainConfig, teacher: &VelocityModel, arm: Arm, seed: u64) -> Result<MetricReport> {
    let mut cfg = base.clone();
    cfg.variant = arm.variant;
    cfg.sim = arm.sim;
    cfg.seed = seed;
    cfg.validate()?;
    let state = trainer::distill(&cfg, teacher)?;
    student_report(&state, &arm.label())
}

/// Trains and evaluates every (arm, seed) cell of `matrix` from `base`.
/// Cells run on up to `available_parallelism` threads and are joined before
/// the table is returned; a failing cell is recorded and the rest continue.
pub fn run_ablation(base: &TrainConfig, teacher: &VelocityModel, matrix: &AblationMatrix) -> Result<AblationTable> {
    let cells = matrix.cells();
    if cells.is_empty() {
        return Err(Error::Empty("ablation matrix has no cells".into()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cells.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<AblationRow>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(arm, seed)) = cells.get(i) else { break };
                let start = Instant::now();
                let outcome = run_cell(base, teacher, arm, seed).map_err(|e| e.to_string());
                let row = AblationRow { arm, seed, steps: base.n_student_steps, outcome, runtime_s: start.elapsed().as_secs_f64() };
                slots.lock().expect("ablation slot lock")[i] = Some(row);
            });
        }
    });
    let rows = slots.into_inner().expect("ablation slot lock").into_iter().map(|r| r.expect("every cell joined")).collect();
    Ok(AblationTable { rows })
}
