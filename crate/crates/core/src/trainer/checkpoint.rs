//! Binary checkpoints.
//!
//! ```text
//! "ADMD" | version u8 | u32 len + config JSON
//! u32 count | tensor records            (parameters)
//! u32 count | tensor records            (optimizer moments and counters)
//! u64 step | rng seed [32] | rng stream u64 | rng word position u128
//! ```
//!
//! A tensor record is `u32 name len | name | u32 rank | u32 dims.. | f64 data..`,
//! all little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::advreward::Discriminator;
use crate::error::{Error, Result};
use crate::flowmatch::VelocityModel;
use crate::netcore::{OptState, ParamSet};
use crate::rngs;

use super::{TrainConfig, TrainState};

pub const MAGIC: [u8; 4] = *b"ADMD";
pub const VERSION: u8 = 1;

/// Decoded file contents before they are turned back into models.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub opt: ParamSet,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_records(out: &mut Vec<u8>, set: &ParamSet) -> Result<()> {
    put_u32(out, set.len())?;
    for t in set.iter() {
        put_u32(out, t.name.len())?;
        out.extend_from_slice(t.name.as_bytes());
        put_u32(out, t.shape.len())?;
        for &d in &t.shape {
            put_u32(out, d)?;
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        let cfg = self.config.to_json();
        put_u32(&mut out, cfg.len())?;
        out.extend_from_slice(cfg.as_bytes());
        put_records(&mut out, &self.params)?;
        put_records(&mut out, &self.opt)?;
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let len = r.u32()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Malformed("config is not UTF-8".into()))?;
        let config = TrainConfig::from_json(text)?;
        let params = r.records()?;
        let opt = r.records()?;
        let step = u64::from_le_bytes(r.array()?);
        let seed: [u8; 32] = r.array()?;
        let stream = u64::from_le_bytes(r.array()?);
        let word_pos = u128::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            config,
            params,
            opt,
            step,
            rng,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn records(&mut self) -> Result<ParamSet> {
        let count = self.u32()?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = self.u32()?;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()?;
            let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Truncated)?;
            if numel.checked_mul(8).is_none_or(|b| b > self.bytes.len() - self.pos) {
                return Err(Error::Truncated);
            }
            let data = (0..numel).map(|_| self.array().map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
            set.insert(name, shape, data).map_err(|e| Error::Malformed(e.to_string()))?;
        }
        Ok(set)
    }
}

fn opt_records(out: &mut ParamSet, prefix: &str, opt: &OptState) -> Result<()> {
    out.extend(opt.m.prefixed(&format!("{prefix}/m/")))?;
    out.extend(opt.v.prefixed(&format!("{prefix}/v/")))?;
    out.insert(format!("{prefix}/step"), vec![1], vec![opt.step as f64])
}

fn opt_from(set: &ParamSet, prefix: &str, like: &ParamSet) -> Result<OptState> {
    let m = set.strip_prefix(&format!("{prefix}/m/"));
    let v = set.strip_prefix(&format!("{prefix}/v/"));
    if !m.same_layout(like) || !v.same_layout(like) {
        return Err(Error::Malformed(format!("optimizer state {prefix} does not match its parameters")));
    }
    let step = set
        .get(&format!("{prefix}/step"))
        .ok_or_else(|| Error::Malformed(format!("missing {prefix}/step")))?
        .data[0];
    Ok(OptState { m, v, step: step as u64 })
}

fn model_from(set: &ParamSet, prefix: &str, cfg: &TrainConfig) -> Result<VelocityModel> {
    let target = cfg.target_dist()?;
    VelocityModel::from_params(
        target.dim(),
        target.n_components(),
        &cfg.teacher.hidden,
        cfg.teacher.activation,
        set.strip_prefix(prefix),
    )
    .map_err(|e| Error::Malformed(format!("{prefix}: {e}")))
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Result<Self> {
        let mut params = ParamSet::new();
        params.extend(state.teacher.params.prefixed("teacher/"))?;
        params.extend(state.generator.params.prefixed("generator/"))?;
        params.extend(state.fake.params.prefixed("fake/"))?;
        for (k, h) in state.disc.heads.iter().enumerate() {
            params.extend(h.params.prefixed(&format!("heads/{k}/")))?;
        }
        if let Some(r) = &state.reference {
            params.extend(r.params.prefixed("reference/"))?;
        }
        let mut opt = ParamSet::new();
        opt_records(&mut opt, "opt/generator", &state.gen_opt)?;
        opt_records(&mut opt, "opt/fake", &state.fake_opt)?;
        for (k, o) in state.head_opts.iter().enumerate() {
            opt_records(&mut opt, &format!("opt/heads/{k}"), o)?;
        }
        Ok(Self {
            config: state.config.clone(),
            params,
            opt,
            step: state.step,
            rng: state.rng.clone(),
        })
    }

    pub fn into_state(self) -> Result<TrainState> {
        let cfg = self.config;
        let teacher = model_from(&self.params, "teacher/", &cfg)?;
        let mut state = TrainState::new(&cfg, &teacher)?;
        state.generator = model_from(&self.params, "generator/", &cfg)?;
        state.fake = model_from(&self.params, "fake/", &cfg)?;
        let disc: &mut Discriminator = &mut state.disc;
        for (k, h) in disc.heads.iter_mut().enumerate() {
            let p = self.params.strip_prefix(&format!("heads/{k}/"));
            if !p.same_layout(&h.params) {
                return Err(Error::Malformed(format!("head {k} does not match the configured architecture")));
            }
            h.params = p;
        }
        state.reference = if self.params.iter().any(|t| t.name.starts_with("reference/")) {
            Some(model_from(&self.params, "reference/", &cfg)?)
        } else {
            None
        };
        state.gen_opt = opt_from(&self.opt, "opt/generator", &state.generator.params)?;
        state.fake_opt = opt_from(&self.opt, "opt/fake", &state.fake.params)?;
        for k in 0..state.head_opts.len() {
            state.head_opts[k] = opt_from(&self.opt, &format!("opt/heads/{k}"), &state.disc.heads[k].params)?;
        }
        state.step = self.step;
        state.rng = self.rng;
        Ok(state)
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    Checkpoint::from_state(state)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    Checkpoint::read(path)?.into_state()
}

/// A teacher-only file in the same format: teacher tensors, no optimizer
/// records, step 0.
pub fn save_teacher(teacher: &VelocityModel, config: &TrainConfig, path: &Path) -> Result<()> {
    Checkpoint {
        config: config.clone(),
        params: teacher.params.prefixed("teacher/"),
        opt: ParamSet::new(),
        step: 0,
        rng: rngs::stream(config.seed, "teacher/file"),
    }
    .write(path)
}

/// Teacher and the config it was trained with, from either a teacher file or
/// a full training checkpoint.
pub fn load_teacher(path: &Path) -> Result<(VelocityModel, TrainConfig)> {
    let ck = Checkpoint::read(path)?;
    let teacher = model_from(&ck.params, "teacher/", &ck.config)?;
    Ok((teacher, ck.config))
}
