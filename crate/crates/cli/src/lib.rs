//! Argument parsing and subcommand bodies for the `advdmd` binary.

pub mod svg;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use advdmd::evalbench::{self, AblationMatrix};
use advdmd::flowmatch::{ode_sample, standard_normal, TimeGrid, VelocityModel};
use advdmd::rngs;
use advdmd::trainer::checkpoint::Checkpoint;
use advdmd::trainer::{self, SimMode, TrainConfig, TrainState, Variant};
use advdmd::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use svg::{emit_scatter_svg, scatter_svg};

#[derive(Debug, Parser)]
#[command(name = "advdmd", version, about = "Few-step distillation with adversarial GRPO rewards on 2D mixtures", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Advdmd,
    Dmd2,
    GrpoFixed,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Advdmd => Variant::Advdmd,
            VariantArg::Dmd2 => Variant::Dmd2,
            VariantArg::GrpoFixed => Variant::GrpoFixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimArg {
    Sde,
    Ode,
}

impl From<SimArg> for SimMode {
    fn from(s: SimArg) -> Self {
        match s {
            SimArg::Sde => SimMode::Sde,
            SimArg::Ode => SimMode::Ode,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the conditional flow-matching teacher.
    TrainTeacher {
        #[arg(long, conflicts_with = "manifest")]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Re-run from a manifest written by an earlier run.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Distill a few-step student from a teacher.
    Distill {
        #[arg(long, conflicts_with = "manifest")]
        config: Option<PathBuf>,
        /// Teacher file; trained from the config when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, value_enum)]
        sim: Option<SimArg>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Draw samples from a student or teacher checkpoint as CSV `x,y,c`.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 2048)]
        n: usize,
        /// Sampling steps; defaults to the student step count, or the teacher
        /// evaluation step count for teacher files.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write a scatter plot.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Metric report of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a variant x seed matrix.
    Ablate {
        /// `default` ({ode, sde} x {dmd2, advdmd}) or `reward-hacking`.
        #[arg(long, default_value = "default")]
        matrix: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Output CSV; medians go to `<stem>.summary.csv` beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

/// Record of one run, written before training starts and completed at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub teacher: Option<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

pub fn version_string() -> String {
    option_env!("ADVDMD_DESCRIBE").map_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")), str::to_string)
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig, teacher: Option<PathBuf>, outputs: Vec<PathBuf>) -> Self {
        RunManifest {
            command: command.to_string(),
            version: version_string(),
            seed: config.seed,
            config: config.clone(),
            teacher,
            started_unix: now_unix(),
            finished_unix: None,
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.config.validate()?;
        Ok(m)
    }

    pub fn finish(&mut self, path: &Path) -> Result<()> {
        self.finished_unix = Some(now_unix());
        self.write(path)
    }
}

fn resolve_config(config: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_samples_csv<W: Write>(x: ArrayView2<f64>, cond: &[usize], mut out: W) -> Result<()> {
    writeln!(out, "x,y,c")?;
    for (row, c) in x.rows().into_iter().zip(cond) {
        writeln!(out, "{},{},{}", row[0], row[1], c)?;
    }
    out.flush()?;
    Ok(())
}

fn write_loss_csv(losses: &[f64], path: &Path) -> Result<()> {
    let mut out = create_file(path)?;
    writeln!(out, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l}")?;
    }
    out.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn train_teacher_cmd(cfg: &TrainConfig, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let ckpt = out.join("teacher.ckpt");
    let loss = out.join("teacher_loss.csv");
    let manifest_path = out.join("manifest.json");
    let mut manifest = RunManifest::new("train-teacher", cfg, None, vec![ckpt.clone(), loss.clone()]);
    manifest.write(&manifest_path)?;
    let (teacher, losses) = trainer::train_teacher(cfg, cfg.seed)?;
    trainer::save_teacher(&teacher, cfg, &ckpt)?;
    write_loss_csv(&losses, &loss)?;
    manifest.finish(&manifest_path)?;
    Ok(ckpt)
}

fn obtain_teacher(cfg: &TrainConfig, teacher: Option<&Path>) -> Result<VelocityModel> {
    match teacher {
        Some(p) => Ok(trainer::load_teacher(p)?.0),
        None => Ok(trainer::train_teacher(cfg, cfg.seed)?.0),
    }
}

/// Runs a distillation into `out`: manifest, per-step metrics, final
/// checkpoint, evaluation samples with a scatter plot, and the metric report.
pub fn distill_cmd(cfg: &TrainConfig, teacher_path: Option<&Path>, out: &Path) -> Result<TrainState> {
    fs::create_dir_all(out)?;
    let names = ["metrics.csv", "student.ckpt", "samples.csv", "samples.svg", "report.json"];
    let paths: Vec<PathBuf> = names.iter().map(|n| out.join(n)).collect();
    let manifest_path = out.join("manifest.json");
    let mut manifest = RunManifest::new("distill", cfg, teacher_path.map(Path::to_path_buf), paths.clone());
    manifest.write(&manifest_path)?;

    let teacher = obtain_teacher(cfg, teacher_path)?;
    let state = trainer::distill(cfg, &teacher)?;
    trainer::write_metrics_csv(&state.history, create_file(&paths[0])?)?;
    trainer::save_checkpoint(&state, &paths[1])?;
    let inputs = evalbench::EvalInputs::new(&state.target, cfg.eval_samples, cfg.seed);
    let x = state.sample(inputs.z.view(), &inputs.cond)?;
    write_samples_csv(x.view(), &inputs.cond, create_file(&paths[2])?)?;
    emit_scatter_svg(x.view(), &inputs.cond, &state.target, &paths[3])?;
    let label = format!("{}/{}", cfg.variant.as_str(), cfg.sim.as_str());
    write_json(&evalbench::student_report(&state, &label)?, &paths[4])?;
    for incident in &state.incidents {
        eprintln!("warning: {incident}");
    }
    manifest.finish(&manifest_path)?;
    Ok(state)
}

enum Loaded {
    Student(Box<TrainState>),
    Teacher(VelocityModel, TrainConfig),
}

fn load_any(path: &Path) -> Result<Loaded> {
    let ck = Checkpoint::read(path)?;
    if ck.params.iter().any(|t| t.name.starts_with("generator/")) {
        Ok(Loaded::Student(Box::new(ck.into_state()?)))
    } else {
        let (teacher, cfg) = trainer::load_teacher(path)?;
        Ok(Loaded::Teacher(teacher, cfg))
    }
}

pub fn sample_cmd(ckpt: &Path, n: usize, steps: Option<usize>, seed: Option<u64>, out: &Path, svg: Option<&Path>) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("--n must be at least 1".into()));
    }
    if steps == Some(0) {
        return Err(Error::InvalidArgument("--steps must be at least 1".into()));
    }
    let loaded = load_any(ckpt)?;
    let cfg = match &loaded {
        Loaded::Student(s) => &s.config,
        Loaded::Teacher(_, c) => c,
    };
    let target = cfg.target_dist()?;
    let mut rng = rngs::stream(seed.unwrap_or(cfg.seed), "sample/noise");
    let cond = target.sample_conditions(n, &mut rng);
    let z = standard_normal(n, target.dim(), &mut rng);
    let x: Array2<f64> = match &loaded {
        Loaded::Student(s) => {
            let mut c = s.config.clone();
            c.n_student_steps = steps.unwrap_or(c.n_student_steps);
            trainer::sample_student(&s.generator, &c, z.view(), &cond)?
        }
        Loaded::Teacher(t, c) => {
            let grid = TimeGrid::uniform(c.t_max, c.t_min, steps.unwrap_or(c.teacher_eval_steps))?;
            ode_sample(t, z.view(), &cond, &grid, c.w_cfg)?.final_state().clone()
        }
    };
    write_samples_csv(x.view(), &cond, create_file(out)?)?;
    if let Some(p) = svg {
        emit_scatter_svg(x.view(), &cond, &target, p)?;
    }
    Ok(())
}

pub fn eval_cmd(ckpt: &Path, out: &Path) -> Result<evalbench::MetricReport> {
    let report = match load_any(ckpt)? {
        Loaded::Student(s) => {
            let label = format!("{}/{}", s.config.variant.as_str(), s.config.sim.as_str());
            evalbench::student_report(&s, &label)?
        }
        Loaded::Teacher(t, c) => evalbench::teacher_report(&t, &c, c.seed)?,
    };
    write_json(&report, out)?;
    Ok(report)
}

pub fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "ablation".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.summary.csv"))
}

pub fn ablate_cmd(matrix: &str, seeds: u64, out: &Path, config: Option<&Path>, teacher: Option<&Path>) -> Result<evalbench::AblationTable> {
    if seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    let cfg = resolve_config(config, None)?;
    let m = AblationMatrix::by_name(matrix, seeds)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let summary = summary_path(out);
    let manifest_path = out.with_extension("manifest.json");
    let mut manifest = RunManifest::new(&format!("ablate --matrix {matrix} --seeds {seeds}"), &cfg, teacher.map(Path::to_path_buf), vec![out.to_path_buf(), summary.clone()]);
    manifest.write(&manifest_path)?;
    let t = obtain_teacher(&cfg, teacher)?;
    let table = evalbench::run_ablation(&cfg, &t, &m)?;
    table.write_csv(create_file(out)?)?;
    table.write_summary_csv(create_file(&summary)?)?;
    manifest.finish(&manifest_path)?;
    let failures = table.failures();
    for (label, seed, err) in &failures {
        eprintln!("cell {label} seed {seed} failed: {err}");
    }
    if !failures.is_empty() {
        return Err(Error::Io(std::io::Error::other(format!("{} of {} ablation cells failed", failures.len(), table.rows.len()))));
    }
    Ok(table)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { config, out, seed, manifest } => {
            let cfg = match manifest {
                Some(m) => RunManifest::read(&m)?.config,
                None => resolve_config(config.as_deref(), seed)?,
            };
            train_teacher_cmd(&cfg, &out)?;
        }
        Command::Distill { config, teacher, out, seed, variant, sim, manifest } => {
            let (mut cfg, recorded) = match manifest {
                Some(m) => {
                    let m = RunManifest::read(&m)?;
                    (m.config, m.teacher)
                }
                None => (resolve_config(config.as_deref(), None)?, None),
            };
            let teacher = teacher.or(recorded);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = variant {
                cfg.variant = v.into();
            }
            if let Some(s) = sim {
                cfg.sim = s.into();
            }
            cfg.validate()?;
            distill_cmd(&cfg, teacher.as_deref(), &out)?;
        }
        Command::Sample { ckpt, n, steps, out, seed, svg } => sample_cmd(&ckpt, n, steps, seed, &out, svg.as_deref())?,
        Command::Eval { ckpt, out } => {
            eval_cmd(&ckpt, &out)?;
        }
        Command::Ablate { matrix, seeds, out, config, teacher } => {
            ablate_cmd(&matrix, seeds, &out, config.as_deref(), teacher.as_deref())?;
        }
    }
    Ok(())
}
