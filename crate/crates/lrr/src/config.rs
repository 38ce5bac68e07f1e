//! Flat `key = value` run configuration.
//!
//! Files are UTF-8 with one assignment per line and `#` comments. Command
//! line `--key value` pairs override file values. Unknown keys and values of
//! the wrong type are rejected with the key's name.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': '{value}' ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected 'key = value', got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("cannot read {0}")]
    Read(String),
}

/// Every setting a command may use, with defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    /// Directory for checkpoints.
    pub checkpoints: PathBuf,
    pub bank: Option<PathBuf>,
    pub report_dir: PathBuf,
    /// Synthetic data.
    pub frames: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub videos: usize,
    pub video_length: usize,
    /// Training.
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub crop: usize,
    pub queries: usize,
    pub time_budget: f64,
    /// Model sizes.
    pub channels: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub s_xy: f32,
    pub s_tau: f32,
    /// Evaluation.
    pub attack: String,
    pub defense: String,
    pub suite: String,
    pub skip_threshold: Option<f32>,
    pub resize: f32,
    pub language: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            checkpoints: PathBuf::from("checkpoints"),
            bank: None,
            report_dir: PathBuf::from("reports"),
            frames: 5,
            train_pairs: 2000,
            val_pairs: 200,
            videos: 20,
            video_length: 30,
            lr: 2e-3,
            batch: 8,
            epochs: 30,
            eval_every: 100,
            crop: 24,
            queries: 256,
            time_budget: 600.0,
            channels: 32,
            blocks: 4,
            hidden: 64,
            s_xy: 1.0,
            s_tau: 1.0,
            attack: "none".into(),
            defense: "none".into(),
            suite: "small".into(),
            skip_threshold: None,
            resize: 0.5,
            language: true,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "threads",
    "checkpoints",
    "bank",
    "report_dir",
    "frames",
    "train_pairs",
    "val_pairs",
    "videos",
    "video_length",
    "lr",
    "batch",
    "epochs",
    "eval_every",
    "crop",
    "queries",
    "time_budget",
    "channels",
    "blocks",
    "hidden",
    "s_xy",
    "s_tau",
    "attack",
    "defense",
    "suite",
    "skip_threshold",
    "resize",
    "language",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), value: value.into(), reason: e.to_string() })
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "checkpoints" => self.checkpoints = PathBuf::from(v),
            "bank" => self.bank = Some(PathBuf::from(v)),
            "report_dir" => self.report_dir = PathBuf::from(v),
            "frames" => self.frames = parse(key, v)?,
            "train_pairs" => self.train_pairs = parse(key, v)?,
            "val_pairs" => self.val_pairs = parse(key, v)?,
            "videos" => self.videos = parse(key, v)?,
            "video_length" => self.video_length = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "crop" => self.crop = parse(key, v)?,
            "queries" => self.queries = parse(key, v)?,
            "time_budget" => self.time_budget = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "s_xy" => self.s_xy = parse(key, v)?,
            "s_tau" => self.s_tau = parse(key, v)?,
            "attack" => self.attack = v.to_string(),
            "defense" => self.defense = v.to_string(),
            "suite" => self.suite = v.to_string(),
            "skip_threshold" => self.skip_threshold = Some(parse(key, v)?),
            "resize" => self.resize = parse(key, v)?,
            "language" => self.language = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses file text over the defaults.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Resolved `key = value` lines in [`KEYS`] order.
    pub fn render(&self) -> String {
        let mut m = BTreeMap::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let pairs: Vec<(&str, Option<String>)> = vec![
            ("seed", Some(self.seed.to_string())),
            ("threads", Some(self.threads.to_string())),
            ("checkpoints", Some(self.checkpoints.display().to_string())),
            ("bank", opt(&self.bank)),
            ("report_dir", Some(self.report_dir.display().to_string())),
            ("frames", Some(self.frames.to_string())),
            ("train_pairs", Some(self.train_pairs.to_string())),
            ("val_pairs", Some(self.val_pairs.to_string())),
            ("videos", Some(self.videos.to_string())),
            ("video_length", Some(self.video_length.to_string())),
            ("lr", Some(self.lr.to_string())),
            ("batch", Some(self.batch.to_string())),
            ("epochs", Some(self.epochs.to_string())),
            ("eval_every", Some(self.eval_every.to_string())),
            ("crop", Some(self.crop.to_string())),
            ("queries", Some(self.queries.to_string())),
            ("time_budget", Some(self.time_budget.to_string())),
            ("channels", Some(self.channels.to_string())),
            ("blocks", Some(self.blocks.to_string())),
            ("hidden", Some(self.hidden.to_string())),
            ("s_xy", Some(self.s_xy.to_string())),
            ("s_tau", Some(self.s_tau.to_string())),
            ("attack", Some(self.attack.clone())),
            ("defense", Some(self.defense.clone())),
            ("suite", Some(self.suite.clone())),
            ("skip_threshold", self.skip_threshold.map(|v| v.to_string())),
            ("resize", Some(self.resize.to_string())),
            ("language", Some(self.language.to_string())),
        ];
        for (k, v) in pairs {
            m.insert(k, v);
        }
        let mut out = String::new();
        for k in KEYS {
            match m.get(k).and_then(|v| v.as_ref()) {
                Some(v) => out.push_str(&format!("{} = {}\n", k, v)),
                None => out.push_str(&format!("# {} unset\n", k)),
            }
        }
        out
    }
}

/// Reads a config file (when given) and applies `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    load_config_over(RunConfig::default(), path, overrides)
}

/// [`load_config`] starting from `base` instead of the defaults.
pub fn load_config_over(base: RunConfig, path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = base;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read(format!("{}: {}", p.display(), e)))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}
