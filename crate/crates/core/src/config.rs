//! Run configuration and its flat `key = value` text form.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossKind,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// `None` picks the per-dataset default from the file name.
    pub split_ratios: Option<(f64, f64, f64)>,
    pub stride: usize,
    /// Keep only the first rows of the file.
    pub max_rows: Option<usize>,
    pub data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossKind::Arctan,
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            seed: 2024,
            split_ratios: None,
            stride: 1,
            max_rows: None,
            data: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

pub fn parse_ratios(value: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    let [a, b, c] = parts[..] else {
        return Err(Error::Config(format!("split ratios need three values, got {value:?}")));
    };
    let r: (f64, f64, f64) = (parse("split_ratios", a)?, parse("split_ratios", b)?, parse("split_ratios", c)?);
    if !(r.0 > 0.0 && r.1 > 0.0 && r.2 > 0.0) || ((r.0 + r.1 + r.2) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must be positive and sum to 1, got {value:?}")));
    }
    Ok(r)
}

fn optional<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), |x| x.to_string())
}

impl TrainConfig {
    /// Every setting as `(key, value)` in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("seq_len", m.seq_len.to_string()),
            ("pred_len", m.pred_len.to_string()),
            ("channels", m.channels.to_string()),
            ("variant", m.variant.name().to_string()),
            ("ema_alpha", m.alpha.to_string()),
            ("revin_eps", m.revin_eps.to_string()),
            ("revin_affine", m.revin_affine.to_string()),
            ("d_model", m.d_model.to_string()),
            ("d_state", m.d_state.to_string()),
            ("d_conv", m.d_conv.to_string()),
            ("expand", m.expand.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("e_layers", m.e_layers.to_string()),
            ("dropout", m.dropout.to_string()),
            ("trend_layers", m.trend_layers.to_string()),
            ("trend_pool", m.trend_pool.to_string()),
            ("loss", self.loss.name().to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("clip_norm", optional(&self.adam.clip_norm, "none")),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            (
                "split_ratios",
                self.split_ratios
                    .map_or_else(|| "auto".to_string(), |(a, b, c)| format!("{a},{b},{c}")),
            ),
            ("stride", self.stride.to_string()),
            ("max_rows", optional(&self.max_rows, "all")),
            ("data", optional(&self.data.as_ref().map(|p| p.display().to_string()), "")),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        match key {
            "seq_len" => m.seq_len = parse(key, value)?,
            "pred_len" => m.pred_len = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "variant" => m.variant = value.parse()?,
            "ema_alpha" | "alpha" => m.alpha = parse(key, value)?,
            "revin_eps" => m.revin_eps = parse(key, value)?,
            "revin_affine" => m.revin_affine = parse_bool(key, value)?,
            "d_model" => m.d_model = parse(key, value)?,
            "d_state" => m.d_state = parse(key, value)?,
            "d_conv" => m.d_conv = parse(key, value)?,
            "expand" => m.expand = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "e_layers" => m.e_layers = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "trend_layers" => m.trend_layers = parse(key, value)?,
            "trend_pool" => m.trend_pool = parse(key, value)?,
            "loss" => self.loss = value.parse()?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "clip_norm" => {
                self.adam.clip_norm = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "split_ratios" => {
                self.split_ratios = match value {
                    "auto" | "" => None,
                    v => Some(parse_ratios(v)?),
                }
            }
            "stride" => self.stride = parse(key, value)?,
            "max_rows" => {
                self.max_rows = match value {
                    "all" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Apply `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; repeated keys are an error.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// SHA-256 prefix of the canonical text without the data path, so the
    /// same settings hash alike on every machine.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "data" {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.max_epochs),
            ("stride", self.stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("adam needs lr > 0, betas in [0, 1) and eps > 0".into()));
        }
        if a.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}
