//! Run configuration as a flat set of namespaced keys.
//!
//! Resolution order: built-in defaults, then the JSON config file, then
//! `key=value` overrides in the order given. Unknown keys, type
//! mismatches and out-of-range values are rejected with the key named.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

use crate::eval::{ProbeConfig, ProbeMode};
use crate::model::SegmentLayout;
use crate::pointcloud::RotationMode;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` expects {expected}, got {found}")]
    TypeMismatch {
        key: String,
        expected: &'static str,
        found: String,
    },
    #[error("config key `{key}`: {message}")]
    OutOfRange { key: String, message: String },
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "train.batch_size",
    "train.epochs",
    "train.lr0",
    "train.weight_decay",
    "train.seed",
    "layout.K",
    "layout.M",
    "model.encoder_widths",
    "model.proj_hidden",
    "loss.lambda_ti",
    "loss.use_jed",
    "loss.use_jeo",
    "loss.use_ti",
    "aug.rotation_mode",
    "aug.translate",
    "aug.scale_min",
    "aug.scale_max",
    "aug.jitter_sigma",
    "aug.jitter_clip",
    "aug.cutout",
    "aug.cutout_radius",
    "probe.mode",
    "probe.label_fraction",
    "probe.epochs",
    "probe.lr",
    "probe.k",
    "probe.seed",
    "diag.collapse_threshold",
    "data.points",
    "data.seed",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Points per cloud after resampling at load time.
    pub data_points: usize,
    /// Seed for resampling and derived splits at load time.
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            data_points: 256,
            data_seed: 0,
        }
    }
}

fn mismatch(key: &str, expected: &'static str, v: &Value) -> ConfigError {
    ConfigError::TypeMismatch {
        key: key.to_string(),
        expected,
        found: v.to_string(),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, ConfigError> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| mismatch(key, "a non-negative integer", v))
}

fn as_u64(key: &str, v: &Value) -> Result<u64, ConfigError> {
    v.as_u64().ok_or_else(|| mismatch(key, "a non-negative integer", v))
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    v.as_f64().ok_or_else(|| mismatch(key, "a number", v))
}

fn as_bool(key: &str, v: &Value) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| mismatch(key, "true or false", v))
}

fn as_list(key: &str, v: &Value) -> Result<Vec<usize>, ConfigError> {
    v.as_array()
        .and_then(|a| a.iter().map(|x| x.as_u64().map(|u| u as usize)).collect())
        .ok_or_else(|| mismatch(key, "an array of non-negative integers", v))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, ConfigError> {
    v.as_str().ok_or_else(|| mismatch(key, "a string", v))
}

fn out_of_range(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::OutOfRange {
        key: key.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides`, then validation.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| ConfigError::File {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            cfg.apply_json(&text).map_err(|e| match e {
                ConfigError::File { message, .. } => ConfigError::File {
                    path: path.to_path_buf(),
                    message,
                },
                other => other,
            })?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a JSON object of keys; whitespace-only text is empty.
    pub fn apply_json(&mut self, text: &str) -> Result<(), ConfigError> {
        if text.trim().is_empty() {
            return Ok(());
        }
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::File {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| ConfigError::File {
            path: PathBuf::new(),
            message: "config must be a JSON object".into(),
        })?;
        for (k, v) in obj {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// `key=value`; the value is read as JSON, falling back to a string.
    pub fn apply_override(&mut self, text: &str) -> Result<(), ConfigError> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(text.to_string()))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key.trim(), &value)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let p = &mut self.probe;
        match key {
            "train.batch_size" => t.batch_size = as_usize(key, v)?,
            "train.epochs" => t.epochs = as_usize(key, v)?,
            "train.lr0" => t.lr0 = as_f64(key, v)?,
            "train.weight_decay" => t.weight_decay = as_f64(key, v)?,
            "train.seed" => t.seed = as_u64(key, v)?,
            "layout.K" | "layout.M" => {
                let n = as_usize(key, v)?;
                let (k, m) = if key == "layout.K" {
                    (n, t.layout.segment_size())
                } else {
                    (t.layout.segments(), n)
                };
                t.layout = SegmentLayout::new(k, m).map_err(|e| out_of_range(key, e.to_string()))?;
            }
            "model.encoder_widths" => t.encoder.widths = as_list(key, v)?,
            "model.proj_hidden" => t.proj_hidden = as_list(key, v)?,
            "loss.lambda_ti" => t.weights.lambda_ti = as_f64(key, v)?,
            "loss.use_jed" => t.weights.use_jed = as_bool(key, v)?,
            "loss.use_jeo" => t.weights.use_jeo = as_bool(key, v)?,
            "loss.use_ti" => t.weights.use_ti = as_bool(key, v)?,
            "aug.rotation_mode" => {
                let mode = match as_str(key, v)? {
                    "none" => RotationMode::None,
                    "z" => RotationMode::Z,
                    "full" => RotationMode::Full,
                    other => return Err(out_of_range(key, format!("`{other}` is not one of none|z|full"))),
                };
                t.aug1.rotation = mode;
                t.aug2.rotation = mode;
            }
            "aug.translate" => set_both(t, |a, x| a.translate = x, as_f64(key, v)?),
            "aug.scale_min" => set_both(t, |a, x| a.scale_min = x, as_f64(key, v)?),
            "aug.scale_max" => set_both(t, |a, x| a.scale_max = x, as_f64(key, v)?),
            "aug.jitter_sigma" => set_both(t, |a, x| a.jitter_sigma = x, as_f64(key, v)?),
            "aug.jitter_clip" => set_both(t, |a, x| a.jitter_clip = x, as_f64(key, v)?),
            "aug.cutout_radius" => set_both(t, |a, x| a.cutout_radius = x, as_f64(key, v)?),
            "aug.cutout" => {
                let b = as_bool(key, v)?;
                t.aug1.cutout = b;
                t.aug2.cutout = b;
            }
            "probe.mode" => {
                p.mode = as_str(key, v)?
                    .parse::<ProbeMode>()
                    .map_err(|e| out_of_range(key, e.to_string()))?
            }
            "probe.label_fraction" => p.label_fraction = as_f64(key, v)?,
            "probe.epochs" => p.epochs = as_usize(key, v)?,
            "probe.lr" => p.lr = as_f64(key, v)?,
            "probe.k" => p.k = as_usize(key, v)?,
            "probe.seed" => p.seed = as_u64(key, v)?,
            "diag.collapse_threshold" => t.collapse_threshold = as_f64(key, v)?,
            "data.points" => self.data_points = as_usize(key, v)?,
            "data.seed" => self.data_seed = as_u64(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        let t = &self.train;
        let p = &self.probe;
        let a = &t.aug1;
        Some(match key {
            "train.batch_size" => t.batch_size.into(),
            "train.epochs" => t.epochs.into(),
            "train.lr0" => t.lr0.into(),
            "train.weight_decay" => t.weight_decay.into(),
            "train.seed" => t.seed.into(),
            "layout.K" => t.layout.segments().into(),
            "layout.M" => t.layout.segment_size().into(),
            "model.encoder_widths" => t.encoder.widths.clone().into(),
            "model.proj_hidden" => t.proj_hidden.clone().into(),
            "loss.lambda_ti" => t.weights.lambda_ti.into(),
            "loss.use_jed" => t.weights.use_jed.into(),
            "loss.use_jeo" => t.weights.use_jeo.into(),
            "loss.use_ti" => t.weights.use_ti.into(),
            "aug.rotation_mode" => match a.rotation {
                RotationMode::None => "none",
                RotationMode::Z => "z",
                RotationMode::Full => "full",
            }
            .into(),
            "aug.translate" => a.translate.into(),
            "aug.scale_min" => a.scale_min.into(),
            "aug.scale_max" => a.scale_max.into(),
            "aug.jitter_sigma" => a.jitter_sigma.into(),
            "aug.jitter_clip" => a.jitter_clip.into(),
            "aug.cutout" => a.cutout.into(),
            "aug.cutout_radius" => a.cutout_radius.into(),
            "probe.mode" => match p.mode {
                ProbeMode::Linear => "linear",
                ProbeMode::Knn => "knn",
            }
            .into(),
            "probe.label_fraction" => p.label_fraction.into(),
            "probe.epochs" => p.epochs.into(),
            "probe.lr" => p.lr.into(),
            "probe.k" => p.k.into(),
            "probe.seed" => p.seed.into(),
            "diag.collapse_threshold" => t.collapse_threshold.into(),
            "data.points" => self.data_points.into(),
            "data.seed" => self.data_seed.into(),
            _ => return None,
        })
    }

    /// Every key with its resolved value.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for &k in KEYS {
            map.insert(k.to_string(), self.get(k).expect("listed key"));
        }
        Value::Object(map)
    }

    /// One `key=value` string per key, in [`KEYS`] order.
    pub fn echo_lines(&self) -> Vec<String> {
        KEYS.iter()
            .map(|&k| format!("{k}={}", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        let p = &self.probe;
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(out_of_range(key, msg)) };
        check(t.batch_size >= 2, "train.batch_size", "must be >= 2")?;
        check(t.epochs >= 1, "train.epochs", "must be >= 1")?;
        check(t.lr0 > 0.0 && t.lr0.is_finite(), "train.lr0", "must be positive")?;
        check(t.weight_decay >= 0.0 && t.weight_decay.is_finite(), "train.weight_decay", "must be >= 0")?;
        check(
            !t.encoder.widths.is_empty() && !t.encoder.widths.contains(&0),
            "model.encoder_widths",
            "must be a non-empty list of positive widths",
        )?;
        check(!t.proj_hidden.contains(&0), "model.proj_hidden", "widths must be positive")?;
        check(t.weights.lambda_ti >= 0.0 && t.weights.lambda_ti.is_finite(), "loss.lambda_ti", "must be >= 0")?;
        check(
            t.weights.use_jed || t.weights.use_jeo || t.weights.use_ti,
            "loss.use_ti",
            "at least one of loss.use_jed, loss.use_jeo, loss.use_ti must be true",
        )?;
        let a = &t.aug1;
        check(a.translate >= 0.0, "aug.translate", "must be >= 0")?;
        check(a.scale_min > 0.0, "aug.scale_min", "must be positive")?;
        check(a.scale_max >= a.scale_min, "aug.scale_max", "must be >= aug.scale_min")?;
        check(a.jitter_sigma >= 0.0, "aug.jitter_sigma", "must be >= 0")?;
        check(a.jitter_clip >= 0.0, "aug.jitter_clip", "must be >= 0")?;
        check(a.cutout_radius > 0.0, "aug.cutout_radius", "must be positive")?;
        check(
            p.label_fraction > 0.0 && p.label_fraction <= 1.0,
            "probe.label_fraction",
            "must lie in (0, 1]",
        )?;
        check(p.epochs >= 1, "probe.epochs", "must be >= 1")?;
        check(p.lr > 0.0 && p.lr.is_finite(), "probe.lr", "must be positive")?;
        check(p.k >= 1, "probe.k", "must be >= 1")?;
        check(
            t.collapse_threshold > 0.0 && t.collapse_threshold < 1.0,
            "diag.collapse_threshold",
            "must lie in (0, 1)",
        )?;
        check(self.data_points >= 8, "data.points", "must be >= 8")?;
        Ok(())
    }
}

fn set_both(t: &mut TrainConfig, f: impl Fn(&mut crate::pointcloud::AugmentationConfig, f64), x: f64) {
    f(&mut t.aug1, x);
    f(&mut t.aug2, x);
}
