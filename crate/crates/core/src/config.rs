//! Run configuration.
//!
//! Configs are TOML files whose dotted keys mirror [`RunConfig`]; every key is
//! optional and unknown keys are rejected. Overrides use the same dotted keys
//! (`schedule.theta_f=0.5`) and win over file values.
//!
//! ```toml
//! seed = 0
//! mode = "losa"            # losa | lora_baseline | oneshot | nm_losa
//!
//! [schedule]
//! steps = 5                # T
//! theta_f = 0.7            # final mean sparsity
//! omega_1 = 6.0            # initial mean rank
//! kind = "cubic"           # cubic | linear
//!
//! [mask]
//! scorer = "wanda"         # wanda | magnitude
//! nm_group = 8             # M for nm_losa
//! nm_shift = 1             # max N offset from the uniform N per layer
//!
//! [rmi]
//! center = true
//! maps = "outputs"         # outputs | inputs
//! box_delta = 0.1          # per-layer sparsity box half-width around the mean
//!
//! [adapter]
//! sigma = 0.02             # std of freshly grown A rows
//! lora_rank = 8            # fixed rank of the LoRA baseline
//!
//! [optim]
//! lr = 2e-4
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! weight_decay = 0.0
//! max_grad_norm = 0.3
//!
//! [train]
//! epochs = 50              # full-batch Adam steps per outer step
//!
//! [model]
//! dims = [32, 64, 64, 32]
//! sigma = 0.15
//! activation = "relu"      # relu | identity
//! # checkpoint = "dense.ckpt"   # load weights instead of generating them
//!
//! [calib]
//! samples = 128
//! # file = "calib.csv"     # headerless CSV, one sample per row
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdamConfig;
use crate::error::{LosaError, Result};
use crate::masks::Scorer;
use crate::model::Activation;
use crate::rmi::{ImportanceConfig, MapChoice};
use crate::schedule::ScheduleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Losa,
    LoraBaseline,
    Oneshot,
    NmLosa,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Losa => "losa",
            Mode::LoraBaseline => "lora_baseline",
            Mode::Oneshot => "oneshot",
            Mode::NmLosa => "nm_losa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub scorer: Scorer,
    pub nm_group: usize,
    pub nm_shift: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            scorer: Scorer::Wanda,
            nm_group: 8,
            nm_shift: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmiConfig {
    pub center: bool,
    pub maps: MapChoice,
    pub box_delta: f64,
}

impl Default for RmiConfig {
    fn default() -> Self {
        Self {
            center: true,
            maps: MapChoice::Outputs,
            box_delta: 0.1,
        }
    }
}

impl RmiConfig {
    pub fn importance(&self) -> ImportanceConfig {
        ImportanceConfig {
            center: self.center,
            maps: self.maps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub sigma: f64,
    pub lora_rank: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            sigma: 0.02,
            lora_rank: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dims: Vec<usize>,
    pub sigma: f64,
    pub activation: Activation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: vec![32, 64, 64, 32],
            sigma: 0.15,
            activation: Activation::Relu,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            samples: 128,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub schedule: ScheduleConfig,
    pub mask: MaskConfig,
    pub rmi: RmiConfig,
    pub adapter: AdapterConfig,
    pub optim: AdamConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub calib: CalibConfig,
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml_str<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| LosaError::Config(e.message().trim().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let rendered = toml::to_string(&table)
            .map_err(|e| LosaError::Config(format!("re-rendering config: {e}")))?;
        let cfg: RunConfig = toml::from_str(&rendered).map_err(|e| describe_de_error(&e, &rendered))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LosaError::NotFound(path.to_path_buf()),
            _ => LosaError::Io(e),
        })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |msg: String| Err(LosaError::Config(msg));
        if self.model.dims.len() < 2 || self.model.dims.contains(&0) {
            return bad(format!(
                "model.dims needs at least two positive entries, got {:?}",
                self.model.dims
            ));
        }
        if !(self.model.sigma >= 0.0 && self.model.sigma.is_finite()) {
            return bad(format!("model.sigma must be >= 0, got {}", self.model.sigma));
        }
        if self.calib.samples < 2 && self.calib.file.is_none() {
            return bad(format!("calib.samples must be >= 2, got {}", self.calib.samples));
        }
        if !(self.rmi.box_delta >= 0.0 && self.rmi.box_delta.is_finite()) {
            return bad(format!("rmi.box_delta must be >= 0, got {}", self.rmi.box_delta));
        }
        if self.mask.nm_group == 0 {
            return bad("mask.nm_group must be >= 1".into());
        }
        if !(self.adapter.sigma >= 0.0 && self.adapter.sigma.is_finite()) {
            return bad(format!("adapter.sigma must be >= 0, got {}", self.adapter.sigma));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return bad(format!("optim.lr must be >= 0, got {}", o.lr));
        }
        for (key, v) in [("optim.beta1", o.beta1), ("optim.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{key} must be in [0, 1), got {v}"));
            }
        }
        if o.eps.is_nan() || o.eps <= 0.0 {
            return bad(format!("optim.eps must be > 0, got {}", o.eps));
        }
        if o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return bad(format!("optim.weight_decay must be >= 0, got {}", o.weight_decay));
        }
        if !o.max_grad_norm.is_finite() {
            return bad("optim.max_grad_norm must be finite".into());
        }
        for (key, path) in [
            ("model.checkpoint", &self.model.checkpoint),
            ("calib.file", &self.calib.file),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return bad(format!("{key}: file not found: {}", p.display()));
                }
            }
        }
        Ok(())
    }
}

/// Names the offending `section.key` by locating the error span in `text`.
fn describe_de_error(e: &toml::de::Error, text: &str) -> LosaError {
    let msg = e.message().trim();
    let Some(span) = e.span() else {
        return LosaError::Config(msg.to_string());
    };
    let before = &text[..span.start.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let section = before
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[')?.strip_suffix(']'))
        .map(str::to_string);
    match line.split_once('=') {
        Some((key, _)) if !line.trim_start().starts_with('[') => {
            let key = key.trim();
            let path = section.map_or(key.to_string(), |s| format!("{s}.{key}"));
            LosaError::Config(format!("{path}: {msg}"))
        }
        _ => LosaError::Config(msg.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| LosaError::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(LosaError::Config(format!("override {spec:?} has an empty key")));
    }
    // Parse as a TOML literal; bare words fall back to strings.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("non-empty key");
    let mut cursor = table;
    for part in parts {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| {
            LosaError::Config(format!("override {key}: `{part}` is not a section"))
        })?;
    }
    cursor.insert(leaf.to_string(), value);
    Ok(())
}
