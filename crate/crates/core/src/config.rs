//! Run configuration: flat `key = value` lines, `#` comments, dotted keys.
//!
//! ```text
//! data.path = corpus.tsv
//! denoiser.layers = 2
//! train.epochs = 40   # trailing comments are fine
//! ```

use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::MAX_EXACT;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::GuidanceMode;
use crate::graphdata::Vocab;
use crate::smiles::PropertyId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` set twice")]
    Duplicate { line: usize, key: String },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("missing required key `{0}`")]
    Missing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeMode {
    Marginal,
    Inferred,
}

impl std::str::FromStr for SizeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "marginal" => Ok(SizeMode::Marginal),
            "inferred" => Ok(SizeMode::Inferred),
            other => Err(format!("expected marginal or inferred, got {other:?}")),
        }
    }
}

impl std::fmt::Display for SizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SizeMode::Marginal => "marginal",
            SizeMode::Inferred => "inferred",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub vocab: String,
    pub properties: Vec<PropertyId>,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub steps: usize,
    pub schedule_offset: f64,
    pub denoiser: DenoiserConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub nodecount: bool,
    pub nodecount_hidden: usize,
    pub nodecount_epochs: usize,
    pub nodecount_lr: f64,
    pub nodecount_batch_size: usize,
    pub s: f64,
    pub mode: GuidanceMode,
    pub size: SizeMode,
    pub k: usize,
    pub r: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: PathBuf::new(),
            vocab: "qm9".into(),
            properties: vec![PropertyId::HeavyAtomCount, PropertyId::HeteroFraction],
            train_fraction: 0.8,
            validation_fraction: 0.1,
            steps: 50,
            schedule_offset: crate::schedule::COSINE_OFFSET,
            denoiser: DenoiserConfig::default(),
            lr: 2e-3,
            weight_decay: 1e-12,
            epochs: 40,
            batch_size: 32,
            nodecount: true,
            nodecount_hidden: 64,
            nodecount_epochs: 200,
            nodecount_lr: 3e-3,
            nodecount_batch_size: 64,
            s: 1.0,
            mode: GuidanceMode::Linear,
            size: SizeMode::Inferred,
            k: 100,
            r: 10,
            seed: 0,
            output_dir: PathBuf::from("run"),
        }
    }
}

const KEYS: &[&str] = &[
    "data.path",
    "data.vocab",
    "data.properties",
    "data.train_fraction",
    "data.validation_fraction",
    "schedule.steps",
    "schedule.offset",
    "denoiser.layers",
    "denoiser.d_node",
    "denoiser.d_edge",
    "denoiser.d_global",
    "denoiser.heads",
    "denoiser.d_guide",
    "denoiser.rho",
    "denoiser.gamma",
    "train.lr",
    "train.weight_decay",
    "train.epochs",
    "train.batch_size",
    "nodecount.enabled",
    "nodecount.hidden",
    "nodecount.epochs",
    "nodecount.lr",
    "nodecount.batch_size",
    "sample.s",
    "sample.mode",
    "sample.size",
    "eval.k",
    "eval.r",
    "seed",
    "output.dir",
];

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| invalid(key, format!("cannot parse {v:?}: {e}")))
}

/// `base/v` with `.` and `..` folded away lexically.
fn resolve(base: &Path, v: &str) -> PathBuf {
    let mut out = PathBuf::new();
    for c in base.join(v).components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir if matches!(out.components().next_back(), Some(Component::Normal(_))) => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

impl RunConfig {
    /// Parses config text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: line_no })?;
            let (key, v) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(ConfigError::UnknownKey {
                    line: line_no,
                    key: key.to_string(),
                });
            };
            if seen.contains(&known) {
                return Err(ConfigError::Duplicate {
                    line: line_no,
                    key: key.to_string(),
                });
            }
            seen.push(known);
            c.set(known, v, base)?;
        }
        if !seen.contains(&"data.path") {
            return Err(ConfigError::Missing("data.path".into()));
        }
        if !seen.contains(&"output.dir") {
            c.output_dir = resolve(base, &c.output_dir.display().to_string());
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<(), ConfigError> {
        let d = &mut self.denoiser;
        match key {
            "data.path" => self.data_path = resolve(base, v),
            "data.vocab" => self.vocab = v.to_string(),
            "data.properties" => {
                self.properties = v
                    .split(',')
                    .map(|p| p.trim().parse::<PropertyId>().map_err(|e| invalid(key, e.to_string())))
                    .collect::<Result<_, _>>()?
            }
            "data.train_fraction" => self.train_fraction = parse_as(key, v)?,
            "data.validation_fraction" => self.validation_fraction = parse_as(key, v)?,
            "schedule.steps" => self.steps = parse_as(key, v)?,
            "schedule.offset" => self.schedule_offset = parse_as(key, v)?,
            "denoiser.layers" => d.layers = parse_as(key, v)?,
            "denoiser.d_node" => d.d_node = parse_as(key, v)?,
            "denoiser.d_edge" => d.d_edge = parse_as(key, v)?,
            "denoiser.d_global" => d.d_global = parse_as(key, v)?,
            "denoiser.heads" => d.heads = parse_as(key, v)?,
            "denoiser.d_guide" => d.d_guide = parse_as(key, v)?,
            "denoiser.rho" => d.rho = parse_as(key, v)?,
            "denoiser.gamma" => d.gamma = parse_as(key, v)?,
            "train.lr" => self.lr = parse_as(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_as(key, v)?,
            "train.epochs" => self.epochs = parse_as(key, v)?,
            "train.batch_size" => self.batch_size = parse_as(key, v)?,
            "nodecount.enabled" => self.nodecount = parse_as(key, v)?,
            "nodecount.hidden" => self.nodecount_hidden = parse_as(key, v)?,
            "nodecount.epochs" => self.nodecount_epochs = parse_as(key, v)?,
            "nodecount.lr" => self.nodecount_lr = parse_as(key, v)?,
            "nodecount.batch_size" => self.nodecount_batch_size = parse_as(key, v)?,
            "sample.s" => self.s = parse_as(key, v)?,
            "sample.mode" => self.mode = parse_as(key, v)?,
            "sample.size" => self.size = parse_as(key, v)?,
            "eval.k" => self.k = parse_as(key, v)?,
            "eval.r" => self.r = parse_as(key, v)?,
            "seed" => self.seed = parse_as(key, v)?,
            "output.dir" => self.output_dir = resolve(base, v),
            _ => unreachable!("key list and setter agree"),
        }
        Ok(())
    }

    /// Checks every value against the preconditions of the module using it.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |key: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(invalid(key, format!("must lie in [0, 1], got {x}")))
            }
        };
        let positive = |key: &str, x: usize| {
            if x >= 1 {
                Ok(())
            } else {
                Err(invalid(key, "must be at least 1"))
            }
        };
        let nonneg = |key: &str, x: f64| {
            if x.is_finite() && x >= 0.0 {
                Ok(())
            } else {
                Err(invalid(key, format!("must be finite and non-negative, got {x}")))
            }
        };
        if Vocab::by_name(&self.vocab).is_none() {
            return Err(invalid("data.vocab", format!("unknown vocabulary {:?}", self.vocab)));
        }
        if self.properties.is_empty() {
            return Err(invalid("data.properties", "at least one property is required"));
        }
        unit("data.train_fraction", self.train_fraction)?;
        unit("data.validation_fraction", self.validation_fraction)?;
        if self.train_fraction + self.validation_fraction > 1.0 || self.train_fraction == 0.0 {
            return Err(invalid(
                "data.train_fraction",
                "train must be positive and train + validation at most 1",
            ));
        }
        positive("schedule.steps", self.steps)?;
        if !(self.schedule_offset > 0.0 && self.schedule_offset.is_finite()) {
            return Err(invalid("schedule.offset", "must be positive"));
        }
        let d = &self.denoiser;
        positive("denoiser.layers", d.layers)?;
        positive("denoiser.d_node", d.d_node)?;
        positive("denoiser.d_edge", d.d_edge)?;
        positive("denoiser.d_global", d.d_global)?;
        positive("denoiser.heads", d.heads)?;
        positive("denoiser.d_guide", d.d_guide)?;
        if d.d_node % d.heads != 0 {
            return Err(invalid("denoiser.heads", "must divide denoiser.d_node"));
        }
        unit("denoiser.rho", d.rho)?;
        nonneg("denoiser.gamma", d.gamma)?;
        nonneg("train.lr", self.lr)?;
        nonneg("train.weight_decay", self.weight_decay)?;
        positive("train.batch_size", self.batch_size)?;
        positive("nodecount.hidden", self.nodecount_hidden)?;
        nonneg("nodecount.lr", self.nodecount_lr)?;
        positive("nodecount.batch_size", self.nodecount_batch_size)?;
        nonneg("sample.s", self.s)?;
        if self.size == SizeMode::Inferred && !self.nodecount {
            return Err(invalid("sample.size", "inferred sizes need nodecount.enabled = true"));
        }
        positive("eval.k", self.k)?;
        positive("eval.r", self.r)?;
        if self.seed as f64 > MAX_EXACT {
            return Err(invalid("seed", "must be at most 2^53"));
        }
        Ok(())
    }

    /// Every key with its effective value; parsing this text reproduces the
    /// config exactly.
    pub fn to_text(&self) -> String {
        let d = &self.denoiser;
        let props: Vec<&str> = self.properties.iter().map(|p| p.name()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("data.path", self.data_path.display().to_string());
        kv("data.vocab", self.vocab.clone());
        kv("data.properties", props.join(","));
        kv("data.train_fraction", format!("{:?}", self.train_fraction));
        kv("data.validation_fraction", format!("{:?}", self.validation_fraction));
        kv("schedule.steps", self.steps.to_string());
        kv("schedule.offset", format!("{:?}", self.schedule_offset));
        kv("denoiser.layers", d.layers.to_string());
        kv("denoiser.d_node", d.d_node.to_string());
        kv("denoiser.d_edge", d.d_edge.to_string());
        kv("denoiser.d_global", d.d_global.to_string());
        kv("denoiser.heads", d.heads.to_string());
        kv("denoiser.d_guide", d.d_guide.to_string());
        kv("denoiser.rho", format!("{:?}", d.rho));
        kv("denoiser.gamma", format!("{:?}", d.gamma));
        kv("train.lr", format!("{:?}", self.lr));
        kv("train.weight_decay", format!("{:?}", self.weight_decay));
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("nodecount.enabled", self.nodecount.to_string());
        kv("nodecount.hidden", self.nodecount_hidden.to_string());
        kv("nodecount.epochs", self.nodecount_epochs.to_string());
        kv("nodecount.lr", format!("{:?}", self.nodecount_lr));
        kv("nodecount.batch_size", self.nodecount_batch_size.to_string());
        kv("sample.s", format!("{:?}", self.s));
        kv("sample.mode", self.mode.to_string());
        kv("sample.size", self.size.to_string());
        kv("eval.k", self.k.to_string());
        kv("eval.r", self.r.to_string());
        kv("seed", self.seed.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        s
    }
}
