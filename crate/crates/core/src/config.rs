//! Line-oriented `key = value` run configuration.
//!
//! ```text
//! # comment
//! [schedule]
//! T = 100
//! delta = 0.001
//! [dataset]
//! name = contract_noise
//! ```
//!
//! Keys live in the sections `[schedule]`, `[train]`, `[model]` and
//! `[dataset]`. Unknown and duplicate keys are errors. Overrides of the form
//! `section.key=value` replace file values.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};

use crate::data::{DatasetName, PairedDataset};
use crate::error::{FodError, Result};
use crate::model::{AdamWConfig, ModelConfig};
use crate::samplers::SamplerSpec;
use crate::schedules::{build_schedule, ScheduleConfig};
use crate::training::{Objective, TrainConfig};

const KEYS: &[(&str, &[&str])] = &[
    ("schedule", &["T", "theta_kind", "sigma_kind", "delta", "theta_scale", "sigma_scale"]),
    (
        "train",
        &[
            "objective",
            "iterations",
            "batch_size",
            "lr",
            "beta1",
            "beta2",
            "weight_decay",
            "eps",
            "seed",
            "eval_every",
            "eval_n",
            "eval_sampler",
            "eval_k",
            "record_wall_time",
        ],
    ),
    ("model", &["hidden", "embed_dim"]),
    ("dataset", &["name", "mode"]),
];

fn known(section: &str, key: &str) -> bool {
    KEYS.iter().any(|(s, keys)| *s == section && keys.contains(&key))
}

/// Where a value came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    value: String,
    origin: Origin,
}

/// Parsed but untyped configuration entries keyed by `(section, key)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig {
    entries: BTreeMap<(String, String), Entry>,
}

pub fn parse_config(text: &str) -> Result<RawConfig> {
    let mut raw = RawConfig::default();
    let mut section: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| FodError::ConfigLine { line: line_no, message };
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| err(format!("malformed section header '{content}'")))?.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(err(format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected 'key = value', got '{content}'")))?;
        let (key, value) = (key.trim(), value.trim());
        let Some(sec) = &section else {
            return Err(err(format!("key '{key}' appears before any section")));
        };
        if !known(sec, key) {
            return Err(err(format!("unknown key '{key}' in [{sec}]")));
        }
        let slot = (sec.clone(), key.to_string());
        if let Some(prev) = raw.entries.get(&slot) {
            let first = match prev.origin {
                Origin::Line(l) => l,
                Origin::Override => 0,
            };
            return Err(err(format!("duplicate key '{key}' in [{sec}] (first set on line {first})")));
        }
        raw.entries.insert(slot, Entry { value: value.to_string(), origin: Origin::Line(line_no) });
    }
    Ok(raw)
}

impl RawConfig {
    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| FodError::Config(format!("override '{spec}' is not of the form section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| FodError::Config(format!("override key '{path}' lacks a section prefix")))?;
        if !known(section, key) {
            return Err(FodError::Config(format!("unknown key '{key}' in [{section}] (from --set)")));
        }
        self.entries.insert(
            (section.to_string(), key.to_string()),
            Entry { value: value.trim().to_string(), origin: Origin::Override },
        );
        Ok(())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        self.apply_override(&format!("{section}.{key}={value}"))
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries.get(&(section.to_string(), key.to_string())).map(|e| e.value.as_str())
    }

    /// Effective entries as sorted `section.key=value` lines.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for ((section, key), entry) in &self.entries {
            let _ = writeln!(out, "{section}.{key}={}", entry.value);
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn typed<T>(&self, section: &str, key: &str, parse: impl Fn(&str) -> Option<T>, what: &str) -> Result<Option<T>> {
        let Some(entry) = self.entries.get(&(section.to_string(), key.to_string())) else {
            return Ok(None);
        };
        match parse(&entry.value) {
            Some(v) => Ok(Some(v)),
            None => {
                let message = format!("key '{key}' in [{section}] expects {what}, got '{}'", entry.value);
                Err(match entry.origin {
                    Origin::Line(line) => FodError::ConfigLine { line, message },
                    Origin::Override => FodError::Config(format!("{message} (from --set)")),
                })
            }
        }
    }

    fn number<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        self.typed(section, key, |s| s.parse().ok(), std::any::type_name::<T>())
    }

    fn named<T: DeserializeOwned>(&self, section: &str, key: &str) -> Result<Option<T>> {
        self.typed(section, key, |s| serde_json::from_value(serde_json::Value::String(s.to_string())).ok(), "a known name")
    }

    fn required<T>(value: Option<T>, section: &str, key: &str) -> Result<T> {
        value.ok_or_else(|| FodError::Config(format!("missing required key '{key}' in [{section}]")))
    }

    pub fn schedule(&self) -> Result<ScheduleConfig> {
        let d = ScheduleConfig::default();
        let cfg = ScheduleConfig {
            steps: self.number("schedule", "T")?.unwrap_or(d.steps),
            theta_kind: self.named("schedule", "theta_kind")?.unwrap_or(d.theta_kind),
            sigma_kind: self.named("schedule", "sigma_kind")?.unwrap_or(d.sigma_kind),
            delta: self.number("schedule", "delta")?.unwrap_or(d.delta),
            theta_scale: self.number("schedule", "theta_scale")?.unwrap_or(d.theta_scale),
            sigma_scale: self.number("schedule", "sigma_scale")?.unwrap_or(d.sigma_scale),
        };
        build_schedule(&cfg).map_err(|e| FodError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<PairedDataset> {
        let name: DatasetName = Self::required(self.named("dataset", "name")?, "dataset", "name")?;
        let default = PairedDataset::with_default_mode(name);
        Ok(PairedDataset::new(name, self.named("dataset", "mode")?.unwrap_or(default.mode)))
    }

    pub fn model(&self, dim: usize) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let hidden = self.typed(
            "model",
            "hidden",
            |s| s.split(',').map(|p| p.trim().parse::<usize>().ok().filter(|&w| w > 0)).collect::<Option<Vec<_>>>(),
            "a comma-separated list of positive widths",
        )?;
        Ok(ModelConfig {
            dim,
            hidden: hidden.unwrap_or(d.hidden),
            embed_dim: self.number("model", "embed_dim")?.unwrap_or(d.embed_dim),
        })
    }

    pub fn seed(&self) -> Result<u64> {
        Ok(self.number("train", "seed")?.unwrap_or(0))
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let objective: Objective = Self::required(self.named("train", "objective")?, "train", "objective")?;
        let dataset = self.dataset()?;
        let schedule = self.schedule()?;
        let mut cfg = TrainConfig::new(objective, dataset, schedule);
        let d = AdamWConfig::default();
        cfg.optimizer = AdamWConfig {
            lr: self.number("train", "lr")?.unwrap_or(d.lr),
            beta1: self.number("train", "beta1")?.unwrap_or(d.beta1),
            beta2: self.number("train", "beta2")?.unwrap_or(d.beta2),
            weight_decay: self.number("train", "weight_decay")?.unwrap_or(d.weight_decay),
            eps: self.number("train", "eps")?.unwrap_or(d.eps),
        };
        cfg.iterations = self.number("train", "iterations")?.unwrap_or(cfg.iterations);
        cfg.batch_size = self.number("train", "batch_size")?.unwrap_or(cfg.batch_size);
        cfg.seed = self.seed()?;
        cfg.eval_every = self.number("train", "eval_every")?.unwrap_or(cfg.eval_every);
        cfg.eval_n = self.number("train", "eval_n")?.unwrap_or(cfg.eval_n);
        cfg.eval_sampler = SamplerSpec::new(
            self.named("train", "eval_sampler")?.unwrap_or(cfg.eval_sampler.kind),
            self.number("train", "eval_k")?.unwrap_or(cfg.eval_sampler.k),
        );
        cfg.record_wall_time = self.number("train", "record_wall_time")?.unwrap_or(false);
        cfg.model = self.model(dataset.dim())?;
        cfg.validate()?;
        Ok(cfg)
    }
}
