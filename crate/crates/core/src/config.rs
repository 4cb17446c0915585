//! Flat `key = value` experiment configuration.
//!
//! One key per line, `#` starts a comment. [`ExperimentConfig::render`]
//! writes every key, defaults included, and parsing the result gives the
//! same config back. Unknown keys are rejected.
//!
//! ```text
//! # dataset
//! vocab_size = 8
//! noise_sigma = 0.3
//! # encoder
//! num_blocks = 6
//! # training
//! decay_rate = auto
//! ckpt_every = auto
//! # sweep
//! depths = 6,5,4,3,2,1
//! policy = evenly-spaced
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::read_file;
use crate::data::DatasetConfig;
use crate::encoder::{EncoderConfig, GatePolicy};
use crate::error::{DldError, Result};
use crate::trainer::{RdInit, TrainConfig};

pub const SEED_ENV: &str = "DLD_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DatasetConfig,
    pub num_blocks: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// `mode` is set by the command, not the file.
    pub train: TrainConfig,
    /// Epochs between snapshots; `None` means a quarter of the run.
    pub ckpt_every: Option<usize>,
    /// Empty means every depth from `num_blocks` down to 1.
    pub depths: Vec<usize>,
    pub policy: GatePolicy,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DatasetConfig::default(),
            num_blocks: 6,
            model_dim: 32,
            ffn_dim: 64,
            train: TrainConfig::default(),
            ckpt_every: None,
            depths: Vec::new(),
            policy: GatePolicy::default(),
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DldError::Config(format!("bad value `{value}` for {key}")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn auto_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

/// Parses `6,4,2`; `auto` gives the empty list.
pub fn parse_depths(value: &str) -> Result<Vec<usize>> {
    if value.trim() == "auto" {
        return Ok(Vec::new());
    }
    value.split(',').map(|d| parse("depths", d.trim())).collect()
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "vocab_size",
        "feature_dim",
        "min_frames",
        "max_frames",
        "min_tokens",
        "max_tokens",
        "noise_sigma",
        "num_train",
        "num_test",
        "num_blocks",
        "model_dim",
        "ffn_dim",
        "epochs",
        "batch_size",
        "peak_lr",
        "warmup_steps",
        "decay_rate",
        "p_drop",
        "weight_decay",
        "beta1",
        "beta2",
        "eps",
        "max_grad_norm",
        "kld_weight",
        "rd_init",
        "ckpt_every",
        "seed",
        "depths",
        "policy",
        "out",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "vocab_size" => d.vocab_size = parse(key, v)?,
            "feature_dim" => d.feature_dim = parse(key, v)?,
            "min_frames" => d.min_frames = parse(key, v)?,
            "max_frames" => d.max_frames = parse(key, v)?,
            "min_tokens" => d.min_tokens = parse(key, v)?,
            "max_tokens" => d.max_tokens = parse(key, v)?,
            "noise_sigma" => d.noise_sigma = parse(key, v)?,
            "num_train" => d.num_train = parse(key, v)?,
            "num_test" => d.num_test = parse(key, v)?,
            "num_blocks" => self.num_blocks = parse(key, v)?,
            "model_dim" => self.model_dim = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "peak_lr" => t.peak_lr = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "decay_rate" => t.decay_rate = parse_auto(key, v)?,
            "p_drop" => t.p_drop = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "beta1" => t.adam.beta1 = parse(key, v)?,
            "beta2" => t.adam.beta2 = parse(key, v)?,
            "eps" => t.adam.eps = parse(key, v)?,
            "max_grad_norm" => t.max_grad_norm = parse(key, v)?,
            "kld_weight" => t.kld_weight = parse(key, v)?,
            "rd_init" => t.rd_init = RdInit::from_str(v)?,
            "ckpt_every" => self.ckpt_every = parse_auto(key, v)?,
            "seed" => {
                let s = parse(key, v)?;
                t.seed = s;
                d.seed = s;
            }
            "depths" => self.depths = parse_depths(v)?,
            "policy" => self.policy = GatePolicy::from_str(v)?,
            "out" => self.out = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            other => return Err(DldError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_str(text)?;
        Ok(c)
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DldError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                DldError::Config(m) => DldError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| DldError::Config(format!("{} is not utf-8", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data;
        let t = &self.train;
        Some(match key {
            "vocab_size" => d.vocab_size.to_string(),
            "feature_dim" => d.feature_dim.to_string(),
            "min_frames" => d.min_frames.to_string(),
            "max_frames" => d.max_frames.to_string(),
            "min_tokens" => d.min_tokens.to_string(),
            "max_tokens" => d.max_tokens.to_string(),
            "noise_sigma" => d.noise_sigma.to_string(),
            "num_train" => d.num_train.to_string(),
            "num_test" => d.num_test.to_string(),
            "num_blocks" => self.num_blocks.to_string(),
            "model_dim" => self.model_dim.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "peak_lr" => t.peak_lr.to_string(),
            "warmup_steps" => t.warmup_steps.to_string(),
            "decay_rate" => auto_str(&t.decay_rate),
            "p_drop" => t.p_drop.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "eps" => t.adam.eps.to_string(),
            "max_grad_norm" => t.max_grad_norm.to_string(),
            "kld_weight" => t.kld_weight.to_string(),
            "rd_init" => t.rd_init.name().to_string(),
            "ckpt_every" => auto_str(&self.ckpt_every),
            "seed" => t.seed.to_string(),
            "depths" => {
                if self.depths.is_empty() {
                    "auto".to_string()
                } else {
                    self.depths.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                }
            }
            "policy" => self.policy.name().to_string(),
            "out" => self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            _ => return None,
        })
    }

    /// Every key, one per line, in a form [`ExperimentConfig::parse_str`] reads back.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Layered resolution: defaults, then `file`, then `DLD_SEED`, then `flags`.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, flags: &[(&str, String)]) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = env_seed {
            c.set("seed", s)
                .map_err(|_| DldError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
        }
        for (k, v) in flags {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.encoder().validate()?;
        if self.ckpt_every == Some(0) {
            return Err(DldError::Config("ckpt_every must be >= 1".into()));
        }
        if let Some(&bad) = self.depths.iter().find(|&&d| d == 0 || d > self.num_blocks) {
            return Err(DldError::Config(format!("depth {bad} outside [1, {}]", self.num_blocks)));
        }
        Ok(())
    }

    /// Encoder shape implied by the dataset settings.
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            num_blocks: self.num_blocks,
            model_dim: self.model_dim,
            ffn_dim: self.ffn_dim,
            vocab_size: self.data.model_vocab(),
            input_dim: self.data.feature_dim,
            max_len: self.data.max_len(),
        }
    }

    pub fn resolved_ckpt_every(&self) -> usize {
        self.ckpt_every.unwrap_or((self.train.epochs / 4).max(1))
    }

    /// Depths to sweep, largest first.
    pub fn resolved_depths(&self, num_blocks: usize) -> Vec<usize> {
        if self.depths.is_empty() {
            (1..=num_blocks).rev().collect()
        } else {
            self.depths.clone()
        }
    }
}
