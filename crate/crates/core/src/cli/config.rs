use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Settings shared by the training, cross-validation and ablation commands.
///
/// Sources are applied in order: built-in defaults, the `key = value` config
/// file, then command-line flags. Keys are the flag names without dashes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub data: Option<PathBuf>,
    pub k: usize,
    pub seed: u64,
    iterations: Option<u64>,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    halving_period: Option<u64>,
    pub augment: bool,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub out: PathBuf,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    pub fractions: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let norm = Normalization::default();
        RunConfig {
            preset: "desk64".into(),
            data: None,
            k: 10,
            seed: 0,
            iterations: None,
            batch: 32,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            halving_period: None,
            augment: true,
            mean: norm.mean,
            std: norm.std,
            out: PathBuf::from("out"),
            log_interval: 10,
            checkpoint_interval: 1000,
            fractions: crate::eval::ABLATION_FRACTIONS.to_vec(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Iteration budget; 400000 for the full-size preset, 300 otherwise.
    pub fn iterations(&self) -> u64 {
        self.iterations
            .unwrap_or(if self.preset == "paper224" { 400_000 } else { 300 })
    }

    /// Learning-rate halving period; 100000 for the full-size preset, 500
    /// otherwise.
    pub fn halving_period(&self) -> u64 {
        self.halving_period
            .unwrap_or(if self.preset == "paper224" { 100_000 } else { 500 })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        match key.as_str() {
            "preset" => self.preset = value.to_string(),
            "data" => self.data = Some(PathBuf::from(value)),
            "k" => self.k = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "iterations" => self.iterations = Some(parse(&key, value)?),
            "batch" => self.batch = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "momentum" => self.momentum = parse(&key, value)?,
            "weight-decay" => self.weight_decay = parse(&key, value)?,
            "halving-period" => self.halving_period = Some(parse(&key, value)?),
            "augment" => {
                self.augment = match value {
                    "on" | "true" | "yes" => true,
                    "off" | "false" | "no" => false,
                    _ => return Err(Error::config(format!("augment must be on or off, got `{value}`"))),
                }
            }
            "mean" => self.mean = parse_list(&key, value)?,
            "std" => self.std = parse_list(&key, value)?,
            "out" => self.out = PathBuf::from(value),
            "log-interval" => self.log_interval = parse(&key, value)?,
            "checkpoint-interval" => self.checkpoint_interval = parse(&key, value)?,
            "fractions" => self.fractions = parse_list(&key, value)?,
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{}:{}: expected `key = value`",
                    origin.display(),
                    lineno + 1
                ))
            })?;
            self.set(key, value)
                .map_err(|e| Error::config(format!("{}:{}: {e}", origin.display(), lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_sources(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, path)?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.preset.as_str(), "paper224" | "desk64") {
            return Err(Error::config(format!("unknown preset `{}`", self.preset)));
        }
        self.train_config(0).validate()?;
        if self.checkpoint_interval == 0 || self.checkpoint_interval % self.log_interval != 0 {
            return Err(Error::config(format!(
                "checkpoint-interval {} must be a positive multiple of log-interval {}",
                self.checkpoint_interval, self.log_interval
            )));
        }
        if self.mean.len() != 3 || self.std.len() != 3 {
            return Err(Error::config("mean and std need three comma-separated values"));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("std entries must be positive"));
        }
        crate::optim::SgdState::<f32>::new(self.lr, self.momentum, self.weight_decay)?;
        Ok(())
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations(),
            batch_size: self.batch,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            halving_period: self.halving_period(),
            augment: self.augment,
            seed,
            log_interval: self.log_interval,
            normalization: self.normalization(),
        }
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::config("no dataset given; pass --data or set `data`"))
    }

    /// The resolved configuration in the same `key = value` format.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("preset", self.preset.clone());
        if let Some(d) = &self.data {
            line("data", d.display().to_string());
        }
        line("k", self.k.to_string());
        line("seed", self.seed.to_string());
        line("iterations", self.iterations().to_string());
        line("batch", self.batch.to_string());
        line("lr", self.lr.to_string());
        line("momentum", self.momentum.to_string());
        line("weight-decay", self.weight_decay.to_string());
        line("halving-period", self.halving_period().to_string());
        line("augment", if self.augment { "on" } else { "off" }.into());
        line("mean", join(&self.mean));
        line("std", join(&self.std));
        line("out", self.out.display().to_string());
        line("log-interval", self.log_interval.to_string());
        line("checkpoint-interval", self.checkpoint_interval.to_string());
        line("fractions", join(&self.fractions));
        s
    }
}
