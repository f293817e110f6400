//! Training loop: teacher fitting, the fake/discriminator vs generator update
//! schedule, the composite generator objective, and metrics logging.
//!
//! Each scheduled unit draws `groups_per_step` conditions, rolls `group_size`
//! student trajectories per condition, picks one recorded timestep per
//! trajectory and denoises it in one shot. Fake/discriminator units fit the
//! fake model and the heads to those predictions; generator units push them
//! along `alpha * DMD + gamma * GAN + GRPO`.

pub mod checkpoint;
pub mod config;

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, load_teacher, save_checkpoint, save_teacher};
pub use config::{SimMode, TargetConfig, TeacherConfig, TrainConfig, Variant};

use crate::advreward::{self, Discriminator};
use crate::dmdcore::{self, DmdBatch};
use crate::error::{Error, Result};
use crate::evalbench;
use crate::flowmatch::{self, standard_normal, MixtureTarget, TimeGrid, VelocityModel};
use crate::grpocore::{self, GroupBatch, PolicySnapshot};
use crate::netcore::{self, AdamConfig, OptState, ParamSet};
use crate::rngs;
use crate::sdesim::{self, Rollout, SdeSchedule};

/// What a scheduled unit updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    FakeAndDisc,
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scheduled {
    pub role: Role,
    pub grpo: bool,
}

/// Role of unit `step`: `fake_updates_per_gen` fake/discriminator units, then
/// one generator unit. The policy term switches on after `grpo_warmup_steps`
/// generator units. The fixed-reward baseline updates the generator with the
/// policy term on every unit.
pub fn update_schedule(step: u64, cfg: &TrainConfig) -> Scheduled {
    if cfg.variant == Variant::GrpoFixed {
        return Scheduled {
            role: Role::Generator,
            grpo: true,
        };
    }
    let period = cfg.fake_updates_per_gen as u64 + 1;
    if !(step + 1).is_multiple_of(period) {
        return Scheduled {
            role: Role::FakeAndDisc,
            grpo: false,
        };
    }
    Scheduled {
        role: Role::Generator,
        grpo: cfg.variant == Variant::Advdmd && step / period >= cfg.grpo_warmup_steps as u64,
    }
}

/// `alpha * dmd + gamma * gan (+ grpo)`.
pub fn compose_generator_grads(
    dmd: &ParamSet,
    gan: &ParamSet,
    grpo: Option<&ParamSet>,
    alpha: f64,
    gamma: f64,
) -> Result<ParamSet> {
    let mut total = dmd.zeros_like();
    total.add_scaled(dmd, alpha)?;
    total.add_scaled(gan, gamma)?;
    if let Some(g) = grpo {
        total.add_scaled(g, 1.0)?;
    }
    if let Some(name) = total.first_non_finite() {
        return Err(Error::NonFinite(format!("composed generator gradient {name}")));
    }
    Ok(total)
}

/// One row of the metrics log. `None` fields are not applicable to the unit.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub role: &'static str,
    pub l_dmd: Option<f64>,
    pub l_gan: Option<f64>,
    pub l_grpo: Option<f64>,
    pub l_diff: Option<f64>,
    pub l_dis: Option<f64>,
    pub mean_reward: Option<f64>,
    pub grad_norm: Option<f64>,
}

impl StepLog {
    fn new(step: u64, role: &'static str) -> Self {
        Self {
            step,
            role,
            l_dmd: None,
            l_gan: None,
            l_grpo: None,
            l_diff: None,
            l_dis: None,
            mean_reward: None,
            grad_norm: None,
        }
    }

    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        [self.l_dmd, self.l_gan, self.l_grpo, self.l_diff, self.l_dis].into_iter().flatten()
    }
}

pub const METRICS_HEADER: &str = "step,role,L_dmd,L_gan,L_grpo,L_diff,L_dis,mean_reward,grad_norm";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(logs: &[StepLog], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for l in logs {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            l.step,
            l.role,
            opt_field(l.l_dmd),
            opt_field(l.l_gan),
            opt_field(l.l_grpo),
            opt_field(l.l_diff),
            opt_field(l.l_dis),
            opt_field(l.mean_reward),
            opt_field(l.grad_norm)
        )?;
    }
    Ok(())
}

/// Fit the teacher velocity field to the target by conditional flow matching.
/// Returns the model and its per-step loss curve.
pub fn train_teacher(cfg: &TrainConfig, seed: u64) -> Result<(VelocityModel, Vec<f64>)> {
    cfg.validate()?;
    let target = cfg.target_dist()?;
    let tc = &cfg.teacher;
    let mut model = VelocityModel::new(
        target.dim(),
        target.n_components(),
        &tc.hidden,
        tc.activation,
        &mut rngs::stream(seed, "teacher/init"),
    )?;
    let mut opt = OptState::new(&model.params);
    let mut rng = rngs::stream(seed, "teacher/data");
    let mut losses = Vec::with_capacity(tc.train_steps);
    for _ in 0..tc.train_steps {
        losses.push(flowmatch::cfm_train_step(
            &mut model,
            &mut opt,
            &target,
            tc.batch,
            &mut rng,
            tc.cond_dropout,
            tc.lr,
            AdamConfig::default(),
        )?);
    }
    Ok((model, losses))
}

/// Everything that evolves during distillation.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub target: MixtureTarget,
    pub teacher: VelocityModel,
    pub generator: VelocityModel,
    pub fake: VelocityModel,
    pub disc: Discriminator,
    pub gen_opt: OptState,
    pub fake_opt: OptState,
    pub head_opts: Vec<OptState>,
    /// KL anchor of the policy term, captured when it first switches on.
    pub reference: Option<VelocityModel>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepLog>,
    pub incidents: Vec<String>,
}

impl TrainState {
    /// Generator and fake model start from the teacher; heads start at `D = 0.5`.
    pub fn new(config: &TrainConfig, teacher: &VelocityModel) -> Result<Self> {
        config.validate()?;
        let target = config.target_dist()?;
        if teacher.data_dim != target.dim() || teacher.n_conditions != target.n_components() {
            return Err(Error::Shape("teacher does not match the configured target".into()));
        }
        let generator = teacher.clone();
        let fake = teacher.clone();
        let disc = Discriminator::new(
            &fake,
            &config.tap_layers,
            &config.head_hidden,
            &mut rngs::stream(config.seed, "disc/init"),
        )?;
        let reference = (config.variant == Variant::GrpoFixed).then(|| generator.clone());
        Ok(Self {
            gen_opt: OptState::new(&generator.params),
            fake_opt: OptState::new(&fake.params),
            head_opts: disc.heads.iter().map(|h| OptState::new(&h.params)).collect(),
            config: config.clone(),
            target,
            teacher: teacher.clone(),
            generator,
            fake,
            disc,
            reference,
            step: 0,
            rng: rngs::stream(config.seed, "train"),
            history: Vec::new(),
            incidents: Vec::new(),
        })
    }

    /// Student SDE schedule.
    pub fn sde_schedule(&self) -> Result<SdeSchedule> {
        student_schedule(&self.config, self.config.eta)
    }

    /// Deterministic student sampling from `z`.
    pub fn sample(&self, z: ArrayView2<f64>, cond: &[usize]) -> Result<Array2<f64>> {
        sample_student(&self.generator, &self.config, z, cond)
    }
}

/// Uniform grid from `t_max` to `t_min` with `n_student_steps` steps.
pub fn student_schedule(cfg: &TrainConfig, eta: f64) -> Result<SdeSchedule> {
    SdeSchedule::new(
        TimeGrid::uniform(cfg.t_max, cfg.t_min, cfg.n_student_steps)?,
        eta,
        cfg.sigma_cap,
    )
}

/// Few-step deterministic sampling of a student.
pub fn sample_student(generator: &VelocityModel, cfg: &TrainConfig, z: ArrayView2<f64>, cond: &[usize]) -> Result<Array2<f64>> {
    let grid = TimeGrid::uniform(cfg.t_max, cfg.t_min, cfg.n_student_steps)?;
    Ok(flowmatch::ode_sample(generator, z, cond, &grid, 1.0)?.final_state().clone())
}

/// Per-sample states handed to the one-shot denoiser: row `i` is the input of
/// step `picks[i]` of trajectory `i`.
pub fn reuse_states(rollout: &Rollout, picks: &[usize]) -> Result<(Array2<f64>, Vec<f64>)> {
    if picks.len() != rollout.len() {
        return Err(Error::Shape(format!("{} picks for {} trajectories", picks.len(), rollout.len())));
    }
    let d = rollout.initial().ncols();
    let mut x = Array2::zeros((picks.len(), d));
    let mut t = Vec::with_capacity(picks.len());
    for (i, &k) in picks.iter().enumerate() {
        let step = rollout
            .steps
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("step {k} out of range")))?;
        x.row_mut(i).assign(&step.x_from.row(i));
        t.push(step.t_from);
    }
    Ok((x, t))
}

/// Inputs shared by both unit kinds: conditions, the rollouts and the picked states.
struct Draw {
    cond: Vec<usize>,
    /// Stochastic rollout, present whenever rewards or the policy term need it.
    sde: Option<Rollout>,
    x_sel: Array2<f64>,
    t_sel: Vec<f64>,
}

fn draw_units(state: &mut TrainState, need_sde: bool) -> Result<Draw> {
    let cfg = &state.config;
    let g = cfg.group_size;
    let group_conds = state.target.sample_conditions(cfg.groups_per_step, &mut state.rng);
    let cond: Vec<usize> = group_conds.iter().flat_map(|&c| std::iter::repeat_n(c, g)).collect();
    let z = standard_normal(cond.len(), state.target.dim(), &mut state.rng);
    let sde = if need_sde || cfg.sim == SimMode::Sde {
        Some(sdesim::sample_rollout(&state.generator, z.view(), &cond, &state.sde_schedule()?, &mut state.rng)?)
    } else {
        None
    };
    let ode;
    let source = match (cfg.sim, &sde) {
        (SimMode::Sde, Some(r)) => r,
        _ => {
            ode = sdesim::sample_rollout(&state.generator, z.view(), &cond, &student_schedule(cfg, 0.0)?, &mut state.rng)?;
            &ode
        }
    };
    let n_steps = source.n_steps();
    let picks: Vec<usize> = (0..cond.len()).map(|_| state.rng.random_range(0..n_steps)).collect();
    let (x_sel, t_sel) = reuse_states(source, &picks)?;
    Ok(Draw { cond, sde, x_sel, t_sel })
}

fn x0_from(x: &Array2<f64>, t: &[f64], v: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o -= t[i] * v[[i, j]];
        }
    }
    out
}

fn groups_of(rollout: &Rollout, g: usize) -> Vec<Rollout> {
    (0..rollout.len() / g)
        .map(|k| rollout.select(&(k * g..(k + 1) * g).collect::<Vec<_>>()))
        .collect()
}

fn fake_disc_unit(state: &mut TrainState, log: &mut StepLog) -> Result<()> {
    let draw = draw_units(state, false)?;
    let v = flowmatch::VelocityField::velocity(&state.generator, draw.x_sel.view(), &draw.t_sel, &draw.cond)?;
    let x0 = x0_from(&draw.x_sel, &draw.t_sel, &v);
    let batch = dmdcore::renoise(x0.view(), &draw.cond, &mut state.rng, state.config.dmd_t_range)?;
    let (l_diff, fake_grads) = dmdcore::fake_model_loss(&state.fake, &batch)?;
    let real = state.target.sample_given(&draw.cond, &mut state.rng);
    let (l_dis, head_grads) = advreward::disc_loss(
        &state.disc,
        &state.fake,
        real.view(),
        &draw.cond,
        x0.view(),
        &draw.cond,
        &mut state.rng,
    )?;
    let hyper = AdamConfig::default();
    netcore::optimizer_step(&mut state.fake.params, &fake_grads, &mut state.fake_opt, state.config.lr_fake, hyper)?;
    for ((head, opt), g) in state.disc.heads.iter_mut().zip(state.head_opts.iter_mut()).zip(&head_grads) {
        netcore::optimizer_step(&mut head.params, g, opt, state.config.lr_heads, hyper)?;
    }
    log.l_diff = Some(l_diff);
    log.l_dis = Some(l_dis);
    log.grad_norm = Some(fake_grads.norm());
    Ok(())
}

/// Distillation gradients of the generator at the picked states: DMD and GAN
/// parts kept separate so they can be weighted afterwards.
fn distill_grads(state: &mut TrainState, draw: &Draw, log: &mut StepLog) -> Result<(ParamSet, ParamSet)> {
    let (v, trace) = state.generator.velocity_traced(draw.x_sel.view(), &draw.t_sel, &draw.cond)?;
    let x0 = x0_from(&draw.x_sel, &draw.t_sel, &v);
    let batch: DmdBatch = dmdcore::renoise(x0.view(), &draw.cond, &mut state.rng, state.config.dmd_t_range)?;
    let cot = dmdcore::dmd_generator_cotangent(
        &batch,
        &state.teacher,
        &state.fake,
        state.config.w_cfg,
        state.config.normalize_dmd,
    )?;
    let n = batch.len() as f64;
    let (l_gan, cot_xt) = advreward::gan_generator_loss(&state.disc, &state.fake, batch.x_t.view(), &batch.t_new, &draw.cond)?;
    // x0 = x - t v, x_t = (1 - t_new) x0 + t_new eps
    let mut cot_v_dmd = Array2::zeros(v.raw_dim());
    let mut cot_v_gan = Array2::zeros(v.raw_dim());
    for i in 0..batch.len() {
        for j in 0..v.ncols() {
            cot_v_dmd[[i, j]] = -draw.t_sel[i] * cot[[i, j]] / n;
            cot_v_gan[[i, j]] = -draw.t_sel[i] * (1.0 - batch.t_new[i]) * cot_xt[[i, j]];
        }
    }
    let (_, g_dmd) = state.generator.backward_velocity(&trace, cot_v_dmd.view())?;
    let (_, g_gan) = state.generator.backward_velocity(&trace, cot_v_gan.view())?;
    log.l_dmd = Some(dmdcore::dmd_surrogate_loss(&cot));
    log.l_gan = Some(l_gan);
    Ok((g_dmd, g_gan))
}

enum RewardSource {
    Discriminator,
    Proxy,
}

fn reward_groups(state: &TrainState, rollout: &Rollout, source: RewardSource) -> Result<(Vec<GroupBatch>, f64)> {
    let mut groups = Vec::new();
    let mut total = 0.0;
    for r in groups_of(rollout, state.config.group_size) {
        let table = match source {
            RewardSource::Discriminator => advreward::stepwise_rewards(&state.disc, &state.fake, &r, state.config.reward_mode)?,
            RewardSource::Proxy => evalbench::proxy_reward_table(&state.config.proxy, &state.target, &r)?,
        };
        total += table.mean();
        groups.push(GroupBatch::new(r, table)?);
    }
    let mean = total / groups.len() as f64;
    Ok((groups, mean))
}

fn policy_grads(state: &mut TrainState, groups: &[GroupBatch], log: &mut StepLog) -> Result<ParamSet> {
    let reference = state.reference.get_or_insert_with(|| state.generator.clone());
    let snapshot = PolicySnapshot::capture(&state.generator, reference);
    let out = grpocore::grpo_loss(groups, &state.generator, &snapshot, state.config.eps_clip, state.config.beta)?;
    log.l_grpo = Some(out.loss);
    Ok(out.grads)
}

fn generator_unit(state: &mut TrainState, grpo: bool, log: &mut StepLog) -> Result<()> {
    let want_rewards = state.config.variant == Variant::Advdmd;
    let draw = draw_units(state, grpo)?;
    let (g_dmd, g_gan) = distill_grads(state, &draw, log)?;
    let mut g_pol = None;
    if let (true, Some(sde)) = (want_rewards, &draw.sde) {
        let (groups, mean_reward) = reward_groups(state, sde, RewardSource::Discriminator)?;
        log.mean_reward = Some(mean_reward);
        if grpo {
            g_pol = Some(policy_grads(state, &groups, log)?);
        }
    }
    let total = compose_generator_grads(&g_dmd, &g_gan, g_pol.as_ref(), state.config.alpha, state.config.gamma)?;
    log.grad_norm = Some(total.norm());
    netcore::optimizer_step(&mut state.generator.params, &total, &mut state.gen_opt, state.config.lr_gen, AdamConfig::default())
}

fn fixed_reward_unit(state: &mut TrainState, log: &mut StepLog) -> Result<()> {
    let cfg = &state.config;
    let g = cfg.group_size;
    let group_conds = state.target.sample_conditions(cfg.groups_per_step, &mut state.rng);
    let cond: Vec<usize> = group_conds.iter().flat_map(|&c| std::iter::repeat_n(c, g)).collect();
    let z = standard_normal(cond.len(), state.target.dim(), &mut state.rng);
    let rollout = sdesim::sample_rollout(&state.generator, z.view(), &cond, &state.sde_schedule()?, &mut state.rng)?;
    let (groups, mean_reward) = reward_groups(state, &rollout, RewardSource::Proxy)?;
    log.mean_reward = Some(mean_reward);
    let grads = policy_grads(state, &groups, log)?;
    log.grad_norm = Some(grads.norm());
    netcore::optimizer_step(&mut state.generator.params, &grads, &mut state.gen_opt, state.config.lr_gen, AdamConfig::default())
}

/// Mutable network state restored when a unit produces non-finite values.
struct Saved {
    generator: ParamSet,
    fake: ParamSet,
    heads: Vec<ParamSet>,
    gen_opt: OptState,
    fake_opt: OptState,
    head_opts: Vec<OptState>,
    reference: Option<VelocityModel>,
}

impl Saved {
    fn take(s: &TrainState) -> Self {
        Self {
            generator: s.generator.params.clone(),
            fake: s.fake.params.clone(),
            heads: s.disc.heads.iter().map(|h| h.params.clone()).collect(),
            gen_opt: s.gen_opt.clone(),
            fake_opt: s.fake_opt.clone(),
            head_opts: s.head_opts.clone(),
            reference: s.reference.clone(),
        }
    }

    fn restore(self, s: &mut TrainState) {
        s.generator.params = self.generator;
        s.fake.params = self.fake;
        for (h, p) in s.disc.heads.iter_mut().zip(self.heads) {
            h.params = p;
        }
        s.gen_opt = self.gen_opt;
        s.fake_opt = self.fake_opt;
        s.head_opts = self.head_opts;
        s.reference = self.reference;
    }
}

fn run_unit(state: &mut TrainState, f: impl FnOnce(&mut TrainState, &mut StepLog) -> Result<()>, role: &'static str) -> Result<StepLog> {
    let saved = Saved::take(state);
    let mut log = StepLog::new(state.step, role);
    let outcome = f(state, &mut log).and_then(|()| {
        if log.losses().chain(log.grad_norm).all(f64::is_finite) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{role} losses")))
        }
    });
    match outcome {
        Ok(()) => {}
        Err(Error::NonFinite(what)) => {
            saved.restore(state);
            state.incidents.push(format!("step {}: non-finite {what}; state rolled back", state.step));
            log = StepLog::new(state.step, "rollback");
        }
        Err(e) => return Err(e),
    }
    state.step += 1;
    state.history.push(log.clone());
    Ok(log)
}

/// One scheduled unit of the adversarial-reward trainer.
pub fn advdmd_step(state: &mut TrainState) -> Result<StepLog> {
    if state.config.variant != Variant::Advdmd {
        return baseline_step(state, state.config.variant);
    }
    dispatch(state)
}

/// One scheduled unit of a baseline: `dmd2` drops the policy term,
/// `grpo_fixed` trains only the policy term against the proxy reward.
pub fn baseline_step(state: &mut TrainState, variant: Variant) -> Result<StepLog> {
    if variant != state.config.variant {
        return Err(Error::InvalidArgument(format!(
            "state configured for {} cannot run {}",
            state.config.variant.as_str(),
            variant.as_str()
        )));
    }
    dispatch(state)
}

fn dispatch(state: &mut TrainState) -> Result<StepLog> {
    let sched = update_schedule(state.step, &state.config);
    match (state.config.variant, sched.role) {
        (Variant::GrpoFixed, _) => run_unit(state, fixed_reward_unit, "generator"),
        (_, Role::FakeAndDisc) => run_unit(state, fake_disc_unit, "fake_disc"),
        (_, Role::Generator) => run_unit(state, |s, l| generator_unit(s, sched.grpo, l), "generator"),
    }
}

/// Run scheduled units until `state.step == until`.
pub fn run_until(state: &mut TrainState, until: u64) -> Result<()> {
    while state.step < until {
        advdmd_step(state)?;
    }
    Ok(())
}

/// Build a state from the teacher and run the full configured budget.
pub fn distill(config: &TrainConfig, teacher: &VelocityModel) -> Result<TrainState> {
    let mut state = TrainState::new(config, teacher)?;
    run_until(&mut state, config.total_steps as u64)?;
    Ok(state)
}
