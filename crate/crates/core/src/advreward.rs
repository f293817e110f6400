//! Discriminator built on the fake model's hidden features, used both as the
//! adversarial critic and as the per-timestep reward model.
//!
//! `D(x_t, c) = mean_k sigmoid(h_k([tap_k(x_t, t, c), one_hot(c), t]))`, where
//! `tap_k` is a hidden activation of the (frozen) fake model. Only the heads
//! are trained by the discriminator loss.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::flowmatch::{standard_normal, VelocityModel, T_MAX, T_MIN};
use crate::netcore::{self, Activation, ForwardTrace, NetSpec, ParamSet};
use crate::sdesim::{Rollout, Trajectory};

/// How a discriminator output becomes a reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Raw `D` in (0, 1).
    #[default]
    Probability,
    /// `log D - log(1 - D)`.
    Logit,
}

/// One realism head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub spec: NetSpec,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub tap_layers: Vec<usize>,
    pub heads: Vec<Head>,
    pub n_conditions: usize,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sigmoid(l: f64) -> f64 {
    -softplus(-l)
}

fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// `log mean_k sigmoid(sign * l_k)` and the softmax weights of its terms.
fn log_mean_sigmoid(logits: &[f64], sign: f64) -> (f64, Vec<f64>) {
    let ls: Vec<f64> = logits.iter().map(|l| log_sigmoid(sign * l)).collect();
    let m = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = ls.iter().map(|v| (v - m).exp()).sum();
    let lse = m + sum.ln();
    let weights = ls.iter().map(|v| (v - lse).exp()).collect();
    (lse - (logits.len() as f64).ln(), weights)
}

/// Forward state of one discriminator evaluation, kept for backward passes.
pub struct DiscPass {
    fake_trace: ForwardTrace,
    head_traces: Vec<ForwardTrace>,
    /// `n x K` head logits.
    pub logits: Array2<f64>,
}

impl DiscPass {
    /// `D` per sample, strictly inside (0, 1).
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits
            .rows()
            .into_iter()
            .map(|row| {
                let (log_d, _) = log_mean_sigmoid(row.as_slice().expect("standard layout"), 1.0);
                log_d.exp().clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
            })
            .collect()
    }

    /// `(-log D, -log(1 - D))` per sample, computed in logit space.
    pub fn neg_log_terms(&self) -> Vec<(f64, f64)> {
        self.logits
            .rows()
            .into_iter()
            .map(|row| {
                let row = row.as_slice().expect("standard layout");
                (-log_mean_sigmoid(row, 1.0).0, -log_mean_sigmoid(row, -1.0).0)
            })
            .collect()
    }
}

impl Discriminator {
    /// Heads over the given hidden layers of `fake`, with output layers
    /// initialized to zero so that `D = 0.5` everywhere at the start.
    pub fn new<R: Rng + ?Sized>(
        fake: &VelocityModel,
        tap_layers: &[usize],
        head_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if tap_layers.is_empty() {
            return Err(Error::InvalidArgument("discriminator needs at least one head".into()));
        }
        let mut heads = Vec::with_capacity(tap_layers.len());
        for &tap in tap_layers {
            let spec = Self::head_spec(fake, tap, head_hidden)?;
            let params = netcore::init_params(&spec, rng, true);
            heads.push(Head { spec, params });
        }
        Ok(Self {
            tap_layers: tap_layers.to_vec(),
            heads,
            n_conditions: fake.n_conditions,
        })
    }

    /// Architecture of the head reading hidden layer `tap` of `fake`.
    pub fn head_spec(fake: &VelocityModel, tap: usize, head_hidden: &[usize]) -> Result<NetSpec> {
        if tap + 1 >= fake.spec.depth() {
            return Err(Error::InvalidArgument(format!(
                "tap layer {tap} is not a hidden layer of a depth-{} network",
                fake.spec.depth()
            )));
        }
        let mut dims = vec![fake.spec.width(tap) + fake.n_conditions + 1 + 1];
        dims.extend_from_slice(head_hidden);
        dims.push(1);
        NetSpec::new(dims, Activation::Tanh)
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    fn check_taps(&self, fake: &VelocityModel) -> Result<()> {
        for (head, &tap) in self.heads.iter().zip(&self.tap_layers) {
            if tap + 1 >= fake.spec.depth() {
                return Err(Error::InvalidArgument(format!("tap layer {tap} out of range")));
            }
            if head.spec.input_dim() != fake.spec.width(tap) + self.n_conditions + 2 {
                return Err(Error::Shape(format!("head for tap {tap} has the wrong input width")));
            }
        }
        Ok(())
    }

    fn head_input(&self, feat: &Array2<f64>, t: &[f64], cond: &[usize]) -> Array2<f64> {
        let n = feat.nrows();
        let mut extra = Array2::zeros((n, self.n_conditions + 2));
        for i in 0..n {
            extra[[i, cond[i]]] = 1.0;
            extra[[i, self.n_conditions + 1]] = t[i];
        }
        concatenate(Axis(1), &[feat.view(), extra.view()]).expect("row counts agree")
    }

    /// Full forward pass through the frozen backbone and every head.
    pub fn forward(&self, fake: &VelocityModel, x_t: ArrayView2<f64>, t: &[f64], cond: &[usize]) -> Result<DiscPass> {
        self.check_taps(fake)?;
        ensure_finite("discriminator input", x_t.iter().copied())?;
        let (_, fake_trace) = fake.velocity_traced(x_t, t, cond)?;
        let n = x_t.nrows();
        let mut logits = Array2::zeros((n, self.n_heads()));
        let mut head_traces = Vec::with_capacity(self.n_heads());
        for (k, (head, &tap)) in self.heads.iter().zip(&self.tap_layers).enumerate() {
            let feat = fake_trace.activation(tap).expect("tap checked");
            let input = self.head_input(feat, t, cond);
            let (out, trace) = netcore::forward(&head.spec, &head.params, input.view())?;
            logits.column_mut(k).assign(&out.column(0));
            head_traces.push(trace);
        }
        Ok(DiscPass {
            fake_trace,
            head_traces,
            logits,
        })
    }

    /// Parameter gradients of every head for a cotangent on the logits.
    fn head_grads(&self, pass: &DiscPass, cot_logits: &Array2<f64>) -> Result<Vec<ParamSet>> {
        self.heads
            .iter()
            .enumerate()
            .map(|(k, head)| {
                let cot = cot_logits.slice(s![.., k..k + 1]);
                netcore::backward(&head.spec, &head.params, &pass.head_traces[k], cot).map(|(_, g)| g)
            })
            .collect()
    }

    /// Cotangent on the backbone input `x_t` for a cotangent on the logits;
    /// heads and backbone parameters receive nothing.
    fn input_cotangent(&self, fake: &VelocityModel, pass: &DiscPass, cot_logits: &Array2<f64>) -> Result<Array2<f64>> {
        let mut taps = Vec::with_capacity(self.n_heads());
        for (k, (head, &tap)) in self.heads.iter().zip(&self.tap_layers).enumerate() {
            let cot = cot_logits.slice(s![.., k..k + 1]);
            let (cot_in, _) = netcore::backward(&head.spec, &head.params, &pass.head_traces[k], cot)?;
            taps.push((tap, cot_in.slice(s![.., ..fake.spec.width(tap)]).to_owned()));
        }
        let tap_views: Vec<(usize, ArrayView2<f64>)> = taps.iter().map(|(l, a)| (*l, a.view())).collect();
        let (cot_in, _) = netcore::backward_with_taps(&fake.spec, &fake.params, &pass.fake_trace, None, &tap_views)?;
        Ok(cot_in.slice(s![.., ..fake.data_dim]).to_owned())
    }
}

/// `D(x_t, c)` per sample.
pub fn d_score(disc: &Discriminator, fake: &VelocityModel, x_t: ArrayView2<f64>, t: &[f64], cond: &[usize]) -> Result<Vec<f64>> {
    Ok(disc.forward(fake, x_t, t, cond)?.probabilities())
}

/// Adversarial loss evaluated at already-noised inputs:
/// `mean(-log D(x_t)) + mean(-log(1 - D(y_t)))`, with head gradients.
#[allow(clippy::too_many_arguments)]
pub fn disc_loss_at(
    disc: &Discriminator,
    fake: &VelocityModel,
    real_xt: ArrayView2<f64>,
    real_t: &[f64],
    real_c: &[usize],
    fake_yt: ArrayView2<f64>,
    fake_t: &[f64],
    fake_c: &[usize],
) -> Result<(f64, Vec<ParamSet>)> {
    let (nr, nf) = (real_xt.nrows(), fake_yt.nrows());
    if nr == 0 || nf == 0 {
        return Err(Error::Empty("discriminator batch".into()));
    }
    let k = disc.n_heads();
    let mut loss = 0.0;
    let mut grads: Vec<ParamSet> = disc.heads.iter().map(|h| h.params.zeros_like()).collect();

    for (x, t, c, is_real) in [(real_xt, real_t, real_c, true), (fake_yt, fake_t, fake_c, false)] {
        let n = x.nrows() as f64;
        let pass = disc.forward(fake, x, t, c)?;
        let mut cot = Array2::zeros((x.nrows(), k));
        for (i, row) in pass.logits.rows().into_iter().enumerate() {
            let row = row.as_slice().expect("standard layout");
            let sign = if is_real { 1.0 } else { -1.0 };
            let (log_term, weights) = log_mean_sigmoid(row, sign);
            loss -= log_term / n;
            for j in 0..k {
                // d/dl_j of -log mean sigmoid(sign l) = -sign * w_j * sigmoid(-sign l_j)
                cot[[i, j]] = -sign * weights[j] * sigmoid(-sign * row[j]) / n;
            }
        }
        for (acc, g) in grads.iter_mut().zip(disc.head_grads(&pass, &cot)?) {
            acc.add_scaled(&g, 1.0)?;
        }
    }
    ensure_finite("discriminator loss", [loss])?;
    Ok((loss, grads))
}

/// Noise both batches at fresh `t ~ U[T_MIN, T_MAX]` and evaluate the adversarial loss.
#[allow(clippy::too_many_arguments)]
pub fn disc_loss<R: Rng + ?Sized>(
    disc: &Discriminator,
    fake: &VelocityModel,
    real_x: ArrayView2<f64>,
    real_c: &[usize],
    fake_y: ArrayView2<f64>,
    fake_c: &[usize],
    rng: &mut R,
) -> Result<(f64, Vec<ParamSet>)> {
    let (xt, tx) = noise_at_random_times(real_x, rng);
    let (yt, ty) = noise_at_random_times(fake_y, rng);
    disc_loss_at(disc, fake, xt.view(), &tx, real_c, yt.view(), &ty, fake_c)
}

pub(crate) fn noise_at_random_times<R: Rng + ?Sized>(x: ArrayView2<f64>, rng: &mut R) -> (Array2<f64>, Vec<f64>) {
    let n = x.nrows();
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(T_MIN..T_MAX)).collect();
    let eps = standard_normal(n, x.ncols(), rng);
    let mut xt = x.to_owned();
    for (i, mut row) in xt.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (1.0 - t[i]) * *v + t[i] * eps[[i, j]];
        }
    }
    (xt, t)
}

/// Generator-side adversarial loss `mean(-log D(x_t, c))` and its cotangent
/// on `x_t`. Heads and backbone are treated as constants.
pub fn gan_generator_loss(
    disc: &Discriminator,
    fake: &VelocityModel,
    x_t: ArrayView2<f64>,
    t: &[f64],
    cond: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let n = x_t.nrows();
    if n == 0 {
        return Err(Error::Empty("generator adversarial batch".into()));
    }
    let pass = disc.forward(fake, x_t, t, cond)?;
    let k = disc.n_heads();
    let mut loss = 0.0;
    let mut cot = Array2::zeros((n, k));
    for (i, row) in pass.logits.rows().into_iter().enumerate() {
        let row = row.as_slice().expect("standard layout");
        let (log_d, weights) = log_mean_sigmoid(row, 1.0);
        loss -= log_d / n as f64;
        for j in 0..k {
            cot[[i, j]] = -weights[j] * sigmoid(-row[j]) / n as f64;
        }
    }
    ensure_finite("generator adversarial loss", [loss])?;
    let cot_x = disc.input_cotangent(fake, &pass, &cot)?;
    Ok((loss, cot_x))
}

/// Rewards per trajectory (rows) and per step (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RewardTable {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("reward table {rows}x{cols} with {} values", data.len())));
        }
        ensure_finite("reward table", data.iter().copied())?;
        Ok(Self { rows, cols, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

fn reward_from_pass(pass: &DiscPass, mode: RewardMode) -> Vec<f64> {
    match mode {
        RewardMode::Probability => pass.probabilities(),
        RewardMode::Logit => pass
            .neg_log_terms()
            .into_iter()
            .map(|(neg_log_d, neg_log_1md)| neg_log_1md - neg_log_d)
            .collect(),
    }
}

/// `R[i][k] = D(x_i, c)` at the state produced by step `k` of trajectory `i`,
/// evaluated at that state's time.
pub fn stepwise_rewards(disc: &Discriminator, fake: &VelocityModel, group: &Rollout, mode: RewardMode) -> Result<RewardTable> {
    let (g, n_steps) = (group.len(), group.n_steps());
    if g == 0 {
        return Err(Error::Empty("reward group".into()));
    }
    let mut data = vec![0.0; g * n_steps];
    for (k, step) in group.steps.iter().enumerate() {
        let pass = disc.forward(fake, step.x_to.view(), &vec![step.t_to; g], &group.cond)?;
        for (i, r) in reward_from_pass(&pass, mode).into_iter().enumerate() {
            data[i * n_steps + k] = r;
        }
    }
    RewardTable::new(g, n_steps, data)
}

/// Same as [`stepwise_rewards`] for a list of per-sample trajectories, which
/// must share their schedule.
pub fn stepwise_rewards_for(
    disc: &Discriminator,
    fake: &VelocityModel,
    group: &[Trajectory],
    mode: RewardMode,
) -> Result<RewardTable> {
    let first = group.first().ok_or_else(|| Error::Empty("reward group".into()))?;
    let times: Vec<(f64, f64)> = first.steps.iter().map(|s| (s.t_from, s.t_to)).collect();
    for tr in group {
        let other: Vec<(f64, f64)> = tr.steps.iter().map(|s| (s.t_from, s.t_to)).collect();
        if other != times {
            return Err(Error::InvalidArgument("trajectories in a group follow different schedules".into()));
        }
    }
    let (g, n_steps) = (group.len(), times.len());
    let cond: Vec<usize> = group.iter().map(|t| t.condition).collect();
    let mut data = vec![0.0; g * n_steps];
    for (k, &(_, t_to)) in times.iter().enumerate() {
        let x = Array2::from_shape_fn((g, first.z.len()), |(i, j)| group[i].steps[k].x_to[j]);
        let pass = disc.forward(fake, x.view(), &vec![t_to; g], &cond)?;
        for (i, r) in reward_from_pass(&pass, mode).into_iter().enumerate() {
            data[i * n_steps + k] = r;
        }
    }
    RewardTable::new(g, n_steps, data)
}

/// Convex combination of equally shaped tables; weights are renormalized.
pub fn combine_rewards(tables: &[RewardTable], weights: &[f64]) -> Result<RewardTable> {
    let first = tables.first().ok_or_else(|| Error::Empty("reward tables".into()))?;
    if tables.len() != weights.len() {
        return Err(Error::Shape(format!("{} tables, {} weights", tables.len(), weights.len())));
    }
    if tables.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::Shape("reward tables differ in shape".into()));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument("reward weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("reward weights sum to zero".into()));
    }
    let mut data = vec![0.0; first.data.len()];
    for (t, w) in tables.iter().zip(weights) {
        for (d, v) in data.iter_mut().zip(&t.data) {
            *d += w / total * v;
        }
    }
    RewardTable::new(first.rows, first.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdesim::{sample_rollout, SdeSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (VelocityModel, Discriminator, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fake = VelocityModel::new(2, 4, &[16, 16, 16], Activation::Silu, &mut rng).unwrap();
        let disc = Discriminator::new(&fake, &[0, 1, 2], &[8], &mut rng).unwrap();
        (fake, disc, rng)
    }

    #[test]
    fn zero_heads_score_one_half() {
        let (fake, disc, mut rng) = setup(0);
        let x = standard_normal(10, 2, &mut rng) * 5.0;
        let d = d_score(&disc, &fake, x.view(), &[0.3; 10], &[1; 10]).unwrap();
        assert!(d.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn hand_set_logits_average_through_sigmoid() {
        let (fake, mut disc, mut rng) = setup(1);
        disc.heads.truncate(2);
        disc.tap_layers.truncate(2);
        for (head, logit) in disc.heads.iter_mut().zip([3f64.ln(), -(3f64.ln())]) {
            head.params.get_mut("l1.b").unwrap().data[0] = logit;
        }
        let x = standard_normal(4, 2, &mut rng);
        let d = d_score(&disc, &fake, x.view(), &[0.5; 4], &[0; 4]).unwrap();
        for v in d {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let pass = disc.forward(&fake, x.view(), &[0.5; 4], &[0; 4]).unwrap();
        assert!((sigmoid(pass.logits[[0, 0]]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn scores_stay_inside_unit_interval() {
        let (fake, mut disc, mut rng) = setup(2);
        for head in &mut disc.heads {
            head.params = netcore::init_params(&head.spec, &mut rng, false);
            head.params.scale(40.0);
        }
        let x = standard_normal(50, 2, &mut rng) * 3.0;
        let d = d_score(&disc, &fake, x.view(), &[0.2; 50], &[3; 50]).unwrap();
        assert!(d.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn tap_out_of_range_is_rejected() {
        let (fake, _, mut rng) = setup(3);
        assert!(Discriminator::new(&fake, &[3], &[8], &mut rng).is_err());
        assert!(Discriminator::new(&fake, &[], &[8], &mut rng).is_err());
    }

    #[test]
    fn symmetric_initialization_loss_is_two_ln_two() {
        let (fake, disc, mut rng) = setup(4);
        let real = standard_normal(9, 2, &mut rng);
        let gen = standard_normal(7, 2, &mut rng) + 3.0;
        let (loss, _) = disc_loss(&disc, &fake, real.view(), &[0; 9], gen.view(), &[1; 7], &mut rng).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let (gl, _) = gan_generator_loss(&disc, &fake, gen.view(), &[0.5; 7], &[1; 7]).unwrap();
        assert!((gl - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_is_negative_log_score() {
        let (fake, mut disc, mut rng) = setup(5);
        for head in &mut disc.heads {
            head.params = netcore::init_params(&head.spec, &mut rng, false);
        }
        let x = standard_normal(1, 2, &mut rng);
        let d = d_score(&disc, &fake, x.view(), &[0.4], &[2]).unwrap()[0];
        let (l, _) = gan_generator_loss(&disc, &fake, x.view(), &[0.4], &[2]).unwrap();
        assert!((l + d.ln()).abs() < 1e-12);
    }

    #[test]
    fn neg_log_score_decreases_in_score() {
        let mut prev = f64::INFINITY;
        for k in -20..20 {
            let l = k as f64 * 0.5;
            let (log_d, _) = log_mean_sigmoid(&[l, l], 1.0);
            assert!(-log_d < prev);
            prev = -log_d;
        }
    }

    #[test]
    fn rewards_shape_and_initial_value() {
        let (fake, disc, mut rng) = setup(6);
        let schedule = SdeSchedule::uniform(4, 0.7, 3.0).unwrap();
        let z = standard_normal(5, 2, &mut rng);
        let roll = sample_rollout(&fake, z.view(), &[2; 5], &schedule, &mut rng).unwrap();
        let table = stepwise_rewards(&disc, &fake, &roll, RewardMode::Probability).unwrap();
        assert_eq!(table.shape(), (5, 4));
        assert!(table.values().iter().all(|v| *v == 0.5));

        let trajs: Vec<Trajectory> = (0..5).map(|i| roll.trajectory(i)).collect();
        assert_eq!(stepwise_rewards_for(&disc, &fake, &trajs, RewardMode::Probability).unwrap(), table);
    }

    #[test]
    fn mixed_schedules_are_rejected() {
        let (fake, disc, mut rng) = setup(7);
        let z = standard_normal(1, 2, &mut rng);
        let a = sample_rollout(&fake, z.view(), &[0], &SdeSchedule::uniform(4, 0.7, 3.0).unwrap(), &mut rng).unwrap();
        let b = sample_rollout(&fake, z.view(), &[0], &SdeSchedule::uniform(2, 0.7, 3.0).unwrap(), &mut rng).unwrap();
        let err = stepwise_rewards_for(&disc, &fake, &[a.trajectory(0), b.trajectory(0)], RewardMode::Probability);
        assert!(err.is_err());
    }

    #[test]
    fn reward_combination() {
        let a = RewardTable::new(2, 2, vec![0.2; 4]).unwrap();
        let b = RewardTable::new(2, 2, vec![0.8; 4]).unwrap();
        assert_eq!(combine_rewards(std::slice::from_ref(&a), &[1.0]).unwrap(), a);
        let mixed = combine_rewards(&[a.clone(), a.clone()], &[0.3, 0.7]).unwrap();
        assert!(mixed.values().iter().zip(a.values()).all(|(x, y)| (x - y).abs() < 1e-15));
        let mix = combine_rewards(&[a.clone(), b], &[1.0, 1.0]).unwrap();
        assert!(mix.values().iter().all(|v| (v - 0.5).abs() < 1e-15));
        let c = RewardTable::new(1, 4, vec![0.5; 4]).unwrap();
        assert!(combine_rewards(&[a, c], &[1.0, 1.0]).is_err());
    }
}
