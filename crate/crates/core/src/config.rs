//! Experiment configuration: one TOML document with a section per module,
//! plus dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::CondOptions;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::scenegen::DatasetConfig;
use crate::trainer::TrainConfig;
use crate::vae::{VaeConfig, VaeTrainConfig, SPATIAL_FACTOR};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub model: VaeConfig,
    pub train: VaeTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    /// Inference uses the order-independent attention reduction.
    pub deterministic: bool,
    /// Worker threads for per-scene evaluation.
    pub threads: usize,
    pub data: DatasetConfig,
    pub vae: VaeSection,
    pub model: DenoiserConfig,
    pub cond: CondOptions,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            threads: 1,
            data: DatasetConfig::default(),
            vae: VaeSection::default(),
            model: DenoiserConfig::default(),
            cond: CondOptions::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Dotted path of the `key = value` line containing byte `offset`.
fn field_at(text: &str, offset: usize) -> String {
    let upto = &text[..offset.min(text.len())];
    let line_start = upto.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let key = line.split('=').next().unwrap_or("").trim().to_string();
    let section = upto[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').to_string());
    match section {
        Some(s) if !key.is_empty() && !key.starts_with('[') => format!("{s}.{key}"),
        Some(s) => s,
        None => key,
    }
}

fn backticked(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

/// Steps into table key or array index `k`.
fn child<'v>(node: &'v mut toml::Value, k: &str, path: &str) -> Result<&'v mut toml::Value> {
    match node {
        toml::Value::Table(t) => Ok(t
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))),
        toml::Value::Array(a) => {
            let len = a.len();
            k.parse::<usize>()
                .ok()
                .and_then(|i| a.get_mut(i))
                .ok_or_else(|| Error::config(path, format!("`{k}` is not an index below {len}")))
        }
        _ => Err(Error::config(path, format!("`{k}` is not a section"))),
    }
}

impl Config {
    pub fn from_toml(text: &str, name: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let mut field = e.span().map(|s| field_at(text, s.start)).unwrap_or_default();
            if let (true, Some(k)) = (msg.starts_with("unknown field"), backticked(&msg)) {
                if !field.ends_with(&k) {
                    field = if field.is_empty() { k } else { format!("{field}.{k}") };
                }
            }
            Error::Parse {
                file: name.to_string(),
                field: if field.is_empty() { "<root>".into() } else { field },
                msg,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `a.b.c=value` overrides in order. Values are read as TOML
    /// scalars and fall back to bare strings. Numeric path segments index
    /// arrays, e.g. `train.stages.0.steps=100`.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).expect("config round-trips");
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(ov.as_str(), "override must look like key=value"))?;
            let path = path.trim();
            let raw = raw.trim();
            let value = match format!("v = {raw}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").expect("key present"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let keys: Vec<&str> = path.split('.').collect();
            let mut node = &mut root;
            for k in &keys[..keys.len() - 1] {
                node = child(node, k, path)?;
            }
            let last = keys[keys.len() - 1];
            match node {
                toml::Value::Table(t) => {
                    t.insert(last.to_string(), value);
                }
                toml::Value::Array(_) => *child(node, last, path)? = value,
                _ => return Err(Error::config(path, "parent is not a section")),
            }
            let check: std::result::Result<Config, _> = root.clone().try_into();
            if let Err(e) = check {
                return Err(Error::config(path, e.message().to_string()));
            }
        }
        let cfg: Config = root.try_into().map_err(|e: toml::de::Error| Error::config("<overrides>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.threads == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        if self.sampler.steps == 0 {
            return Err(Error::config("sampler.steps", "must be at least 1"));
        }
        let unit = SPATIAL_FACTOR * self.model.patch;
        let sizes = self
            .train
            .stages
            .iter()
            .map(|s| (format!("train.stages.{}", s.name), s.height, s.width))
            .chain(std::iter::once(("data".to_string(), self.data.height, self.data.width)));
        for (what, h, w) in sizes {
            if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
                return Err(Error::config(what, format!("resolution {h}x{w} must be a positive multiple of {unit}")));
            }
        }
        let need = self.train.max_sequence();
        if self.data.frames_per_scene < need {
            return Err(Error::config(
                "data.frames_per_scene",
                format!("{} frames cannot hold {need}-view training sequences", self.data.frames_per_scene),
            ));
        }
        Ok(())
    }
}
