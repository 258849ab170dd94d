//! Run configuration: a sectioned `key = value` file plus dotted overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::augment::AugmentConfig;
use super::episode::EpisodeShape;
use super::model::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub episode: EpisodeConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Where images come from. With `root` unset a synthetic dataset is generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    /// Split manifest, relative to `root` unless absolute.
    pub manifest: PathBuf,
    pub synthetic_classes: [usize; 3],
    pub synthetic_per_class: usize,
    pub synthetic_size: usize,
    pub synthetic_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    /// Queries per class during training.
    pub queries: usize,
    /// Queries per class during validation and testing.
    pub eval_queries: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: u64,
    pub lr: f64,
    /// The learning rate halves every this many episodes.
    pub lr_halving_interval: u64,
    pub val_interval: u64,
    pub val_episodes: usize,
    pub checkpoint_interval: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub repeats: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            data: DataConfig::default(),
            episode: EpisodeConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            manifest: PathBuf::from("manifest.csv"),
            synthetic_classes: [10, 5, 5],
            synthetic_per_class: 30,
            synthetic_size: 24,
            synthetic_seed: 7,
        }
    }
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            way: 5,
            shot: 1,
            queries: 5,
            eval_queries: 15,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 2000,
            lr: 1e-3,
            lr_halving_interval: 500,
            val_interval: 500,
            val_episodes: 100,
            checkpoint_interval: 500,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 600,
            repeats: 1,
        }
    }
}

impl EpisodeConfig {
    pub fn train_shape(&self) -> EpisodeShape {
        EpisodeShape {
            way: self.way,
            shot: self.shot,
            queries: self.queries,
        }
    }

    pub fn eval_shape(&self) -> EpisodeShape {
        EpisodeShape {
            way: self.way,
            shot: self.shot,
            queries: self.eval_queries,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect after `episode` completed episodes.
    pub fn lr_at(&self, episode: u64) -> f64 {
        let halvings = episode / self.lr_halving_interval;
        self.lr * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn line_of(text: &str, err: &toml::de::Error) -> Option<usize> {
    err.span().map(|span| text[..span.start.min(text.len())].matches('\n').count() + 1)
}

fn describe(text: &str, err: &toml::de::Error) -> String {
    let msg = err.message().trim().to_string();
    match line_of(text, err) {
        Some(line) => format!("line {line}: {msg}"),
        None => msg,
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override `{assignment}` has an empty key segment")));
    }
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{key}`: `{part}` is not a section")))?;
    }
    node.insert(path[path.len() - 1].to_string(), override_value(value));
    Ok(())
}

impl Config {
    /// Parses config text, then applies `key=value` overrides in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let base: Config = toml::from_str(text).map_err(|e| config_err(describe(text, &e)))?;
        if overrides.is_empty() {
            base.validate()?;
            return Ok(base);
        }
        let mut table: Table = text.parse().map_err(|e| config_err(describe(text, &e)))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged: Config = Table::try_into(table)
            .map_err(|e: toml::de::Error| config_err(format!("after overrides {overrides:?}: {}", e.message().trim())))?;
        merged.validate()?;
        Ok(merged)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            config_err(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Config::parse(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => config_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The fully resolved configuration as config-file text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.episode;
        if e.way < 2 || e.shot == 0 || e.queries == 0 || e.eval_queries == 0 {
            return Err(config_err("episode: way must be >= 2 and shot, queries, eval_queries >= 1"));
        }
        self.augment.validate().map_err(|e| config_err(format!("augment: {e}")))?;
        if !self.augment.crop.is_multiple_of(crate::frae::SIZE_FACTOR) {
            return Err(config_err(format!(
                "augment: crop {} must be a multiple of {}",
                self.augment.crop,
                crate::frae::SIZE_FACTOR
            )));
        }
        self.model.validate().map_err(|e| config_err(format!("model: {e}")))?;
        let t = &self.train;
        if !(t.lr > 0.0) || t.lr_halving_interval == 0 || t.val_interval == 0 || t.checkpoint_interval == 0 {
            return Err(config_err("train: lr and all intervals must be positive"));
        }
        if self.eval.episodes < 2 || self.eval.repeats == 0 {
            return Err(config_err("eval: need at least 2 episodes and 1 repeat"));
        }
        if !self.data.synthetic_size.is_multiple_of(8) || self.data.synthetic_size == 0 {
            return Err(config_err("data: synthetic_size must be a positive multiple of 8"));
        }
        Ok(())
    }
}
