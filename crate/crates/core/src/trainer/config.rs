//! Training configuration. Every field has a default, so `{}` is a complete
//! config; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advreward::RewardMode;
use crate::error::{Error, Result};
use crate::evalbench::ProxyReward;
use crate::flowmatch::{MixtureTarget, T_MAX, T_MIN};
use crate::netcore::Activation;

/// Which objective the generator is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Distribution matching + adversarial term + GRPO on discriminator rewards.
    Advdmd,
    /// Distribution matching + adversarial term only.
    Dmd2,
    /// GRPO alone against a fixed proxy reward.
    #[serde(alias = "grpo-fixed", alias = "grpo_fixed_reward")]
    GrpoFixed,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Advdmd => "advdmd",
            Variant::Dmd2 => "dmd2",
            Variant::GrpoFixed => "grpo_fixed",
        }
    }
}

/// How intermediate states for the distillation branch are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Sde,
    Ode,
}

impl SimMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SimMode::Sde => "sde",
            SimMode::Ode => "ode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub n_modes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            n_modes: 8,
            radius: 2.0,
            std: 0.15,
        }
    }
}

impl TargetConfig {
    pub fn build(&self) -> Result<MixtureTarget> {
        MixtureTarget::ring(self.n_modes, self.radius, self.std)
    }
}

/// Teacher architecture and flow-matching schedule. Student, fake model
/// and discriminator backbone share this architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
            train_steps: 5000,
            batch: 256,
            lr: 1e-3,
            cond_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the distribution-matching term.
    pub alpha: f64,
    /// Weight of the adversarial term.
    pub gamma: f64,
    /// KL weight of the policy surrogate.
    pub beta: f64,
    pub eps_clip: f64,
    pub eta: f64,
    pub sigma_cap: f64,
    pub group_size: usize,
    pub groups_per_step: usize,
    pub n_student_steps: usize,
    pub fake_updates_per_gen: usize,
    /// Generator updates before the policy term is switched on.
    pub grpo_warmup_steps: usize,
    /// Scheduled units (fake/discriminator and generator updates together).
    pub total_steps: usize,
    pub lr_gen: f64,
    pub lr_fake: f64,
    pub lr_heads: f64,
    pub w_cfg: f64,
    pub seed: u64,
    pub target: TargetConfig,
    pub teacher: TeacherConfig,
    pub t_min: f64,
    pub t_max: f64,
    pub dmd_t_range: (f64, f64),
    pub normalize_dmd: bool,
    pub head_hidden: Vec<usize>,
    pub tap_layers: Vec<usize>,
    pub reward_mode: RewardMode,
    pub proxy: ProxyReward,
    pub sim: SimMode,
    pub variant: Variant,
    pub eval_samples: usize,
    pub teacher_eval_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.01,
            beta: 0.004,
            eps_clip: 0.2,
            eta: 0.7,
            sigma_cap: 3.0,
            group_size: 8,
            groups_per_step: 16,
            n_student_steps: 4,
            fake_updates_per_gen: 5,
            grpo_warmup_steps: 200,
            total_steps: 3000,
            lr_gen: 1e-4,
            lr_fake: 1e-3,
            lr_heads: 3e-3,
            w_cfg: 3.5,
            seed: 0,
            target: TargetConfig::default(),
            teacher: TeacherConfig::default(),
            t_min: T_MIN,
            t_max: T_MAX,
            dmd_t_range: crate::dmdcore::DMD_T_RANGE,
            normalize_dmd: true,
            head_hidden: vec![32],
            tap_layers: vec![0, 1, 2],
            reward_mode: RewardMode::Probability,
            proxy: ProxyReward::default(),
            sim: SimMode::Sde,
            variant: Variant::Advdmd,
            eval_samples: 2048,
            teacher_eval_steps: 50,
        }
    }
}

fn bad(msg: String) -> Error {
    Error::Config(msg)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("eta", self.eta),
            ("w_cfg", self.w_cfg),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(bad(format!("{name} must be a finite value >= 0, got {w}")));
            }
        }
        let rates = [
            ("lr_gen", self.lr_gen),
            ("lr_fake", self.lr_fake),
            ("lr_heads", self.lr_heads),
            ("sigma_cap", self.sigma_cap),
            ("teacher.lr", self.teacher.lr),
            ("target.radius", self.target.radius),
            ("target.std", self.target.std),
        ];
        for (name, r) in rates {
            if !(r.is_finite() && r > 0.0) {
                return Err(bad(format!("{name} must be > 0, got {r}")));
            }
        }
        let counts = [
            ("groups_per_step", self.groups_per_step),
            ("fake_updates_per_gen", self.fake_updates_per_gen),
            ("total_steps", self.total_steps),
            ("eval_samples", self.eval_samples),
            ("teacher_eval_steps", self.teacher_eval_steps),
            ("teacher.train_steps", self.teacher.train_steps),
            ("teacher.batch", self.teacher.batch),
            ("target.n_modes", self.target.n_modes),
        ];
        for (name, c) in counts {
            if c < 1 {
                return Err(bad(format!("{name} must be >= 1")));
            }
        }
        if self.group_size < 2 {
            return Err(bad(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if ![1, 2, 4].contains(&self.n_student_steps) {
            return Err(bad(format!("n_student_steps must be 1, 2 or 4, got {}", self.n_student_steps)));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err(bad(format!("eps_clip must lie in (0, 1), got {}", self.eps_clip)));
        }
        if !(0.0..=1.0).contains(&self.teacher.cond_dropout) {
            return Err(bad("teacher.cond_dropout must lie in [0, 1]".into()));
        }
        if self.teacher.hidden.is_empty() || self.teacher.hidden.contains(&0) {
            return Err(bad("teacher.hidden needs at least one non-empty layer".into()));
        }
        if self.head_hidden.contains(&0) {
            return Err(bad("head_hidden layers must be non-empty".into()));
        }
        if self.tap_layers.is_empty() || self.tap_layers.iter().any(|&l| l >= self.teacher.hidden.len()) {
            return Err(bad(format!(
                "tap_layers {:?} must name hidden layers 0..{}",
                self.tap_layers,
                self.teacher.hidden.len()
            )));
        }
        if !(T_MIN..=T_MAX).contains(&self.t_min) || !(T_MIN..=T_MAX).contains(&self.t_max) || self.t_min >= self.t_max {
            return Err(bad(format!(
                "schedule bounds [{}, {}] must satisfy {T_MIN} <= t_min < t_max <= {T_MAX}",
                self.t_min, self.t_max
            )));
        }
        let (lo, hi) = self.dmd_t_range;
        if !(T_MIN..=T_MAX).contains(&lo) || !(T_MIN..=T_MAX).contains(&hi) || lo > hi {
            return Err(bad(format!("dmd_t_range ({lo}, {hi}) must lie inside [{T_MIN}, {T_MAX}]")));
        }
        if self.variant != Variant::Dmd2 && self.eta == 0.0 {
            return Err(bad(format!("variant {} needs eta > 0", self.variant.as_str())));
        }
        self.proxy.validate()?;
        if let ProxyReward::ModePull { mode, .. } = self.proxy {
            if mode >= self.target.n_modes {
                return Err(bad(format!("proxy mode {mode} out of range")));
            }
        }
        Ok(())
    }

    /// Parse and validate a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn target_dist(&self) -> Result<MixtureTarget> {
        self.target.build()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let cfg = TrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.gamma, 0.01);
        assert_eq!(cfg.fake_updates_per_gen, 5);
        assert_eq!(cfg.w_cfg, 3.5);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let err = TrainConfig::from_json(r#"{"alpha": -1}"#).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_json(r#"{"alpah": 0.2}"#).unwrap_err().to_string();
        assert!(err.contains("alpah"), "{err}");
        let nested = TrainConfig::from_json(r#"{"teacher": {"depth": 3}}"#).unwrap_err().to_string();
        assert!(nested.contains("depth"), "{nested}");
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = TrainConfig::from_json("{\n  \"alpha\": ,\n}").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = TrainConfig {
            variant: Variant::GrpoFixed,
            sim: SimMode::Ode,
            n_student_steps: 2,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn structural_checks() {
        for doc in [
            r#"{"n_student_steps": 3}"#,
            r#"{"group_size": 1}"#,
            r#"{"total_steps": 0}"#,
            r#"{"eps_clip": 1.0}"#,
            r#"{"tap_layers": [3]}"#,
            r#"{"t_min": 0.5, "t_max": 0.4}"#,
            r#"{"eta": 0.0}"#,
        ] {
            assert!(TrainConfig::from_json(doc).is_err(), "{doc}");
        }
        assert!(TrainConfig::from_json(r#"{"eta": 0.0, "variant": "dmd2"}"#).is_ok());
        assert_eq!(
            TrainConfig::from_json(r#"{"variant": "grpo-fixed"}"#).unwrap().variant,
            Variant::GrpoFixed
        );
    }
}
