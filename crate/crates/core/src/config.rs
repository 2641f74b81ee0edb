//! Pipeline configuration: a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored, as is anything after
//! a ` #` on a value line. Keys not listed in [`PipelineConfig::KEYS`] and
//! repeated keys are rejected. An empty value unsets an optional path.
//! Command-line flags are applied on top with [`PipelineConfig::set`], so the
//! precedence is defaults < file < flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub interval_m: f64,
    pub window: usize,
    pub stride: usize,
    pub image_size: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub dense: usize,
    pub dropout: f64,
    pub cnn_lr: f64,
    pub lstm_lr: f64,
    pub cnn_epochs: usize,
    pub lstm_epochs: usize,
    pub cnn_batch: usize,
    pub lstm_batch: usize,
    pub threshold: f64,
    pub seed: u64,
    pub n_points: usize,
    pub network: Option<PathBuf>,
    pub points: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub cnn_model: Option<PathBuf>,
    pub lstm_model: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub map: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            interval_m: 20.0,
            window: 50,
            stride: 1,
            image_size: 32,
            feature_dim: 16,
            hidden: 100,
            dense: 50,
            dropout: 0.2,
            cnn_lr: 1e-3,
            lstm_lr: 1e-3,
            cnn_epochs: 30,
            lstm_epochs: 30,
            cnn_batch: 32,
            lstm_batch: 1,
            threshold: 0.5,
            seed: 0,
            n_points: 2000,
            network: None,
            points: None,
            labels: None,
            features: None,
            manifest: None,
            cnn_model: None,
            lstm_model: None,
            predictions: None,
            metrics: None,
            map: None,
            history: None,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl PipelineConfig {
    /// Every accepted key, in the order [`to_text`](Self::to_text) writes them.
    pub const KEYS: &'static [&'static str] = &[
        "interval_m",
        "window",
        "stride",
        "image_size",
        "feature_dim",
        "hidden",
        "dense",
        "dropout",
        "cnn_lr",
        "lstm_lr",
        "cnn_epochs",
        "lstm_epochs",
        "cnn_batch",
        "lstm_batch",
        "threshold",
        "seed",
        "n_points",
        "network",
        "points",
        "labels",
        "features",
        "manifest",
        "cnn_model",
        "lstm_model",
        "predictions",
        "metrics",
        "map",
        "history",
    ];

    /// Sets one key from its textual value without range checks; call
    /// [`validate`](Self::validate) once all overrides are in.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "interval_m" => self.interval_m = num(key, v)?,
            "window" => self.window = num(key, v)?,
            "stride" => self.stride = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "feature_dim" => self.feature_dim = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "dense" => self.dense = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "cnn_lr" => self.cnn_lr = num(key, v)?,
            "lstm_lr" => self.lstm_lr = num(key, v)?,
            "cnn_epochs" => self.cnn_epochs = num(key, v)?,
            "lstm_epochs" => self.lstm_epochs = num(key, v)?,
            "cnn_batch" => self.cnn_batch = num(key, v)?,
            "lstm_batch" => self.lstm_batch = num(key, v)?,
            "threshold" => self.threshold = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "n_points" => self.n_points = num(key, v)?,
            "network" => self.network = path(v),
            "points" => self.points = path(v),
            "labels" => self.labels = path(v),
            "features" => self.features = path(v),
            "manifest" => self.manifest = path(v),
            "cnn_model" => self.cnn_model = path(v),
            "lstm_model" => self.lstm_model = path(v),
            "predictions" => self.predictions = path(v),
            "metrics" => self.metrics = path(v),
            "map" => self.map = path(v),
            "history" => self.history = path(v),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(" #").next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{source}:{}: {msg}", n + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(at(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => other,
            })?;
        }
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{source}: {m}")),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.interval_m.is_finite() && self.interval_m > 0.0 && self.interval_m <= 10_000.0) {
            return bad(format!("interval_m must be in (0, 10000], got {}", self.interval_m));
        }
        if !(1..=10_000).contains(&self.window) {
            return bad(format!("window must be in [1, 10000], got {}", self.window));
        }
        if !(1..=self.window).contains(&self.stride) {
            return bad(format!("stride must be in [1, window], got {}", self.stride));
        }
        if !(8..=1024).contains(&self.image_size) {
            return bad(format!("image_size must be in [8, 1024], got {}", self.image_size));
        }
        for (key, v) in [("feature_dim", self.feature_dim), ("hidden", self.hidden), ("dense", self.dense)] {
            if !(1..=4096).contains(&v) {
                return bad(format!("{key} must be in [1, 4096], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        for (key, v) in [("cnn_lr", self.cnn_lr), ("lstm_lr", self.lstm_lr)] {
            if !(1e-6..=1e-2).contains(&v) {
                return bad(format!("{key} must be in [1e-6, 1e-2], got {v}"));
            }
        }
        for (key, v) in [("cnn_epochs", self.cnn_epochs), ("lstm_epochs", self.lstm_epochs)] {
            if v > 10_000 {
                return bad(format!("{key} must be at most 10000, got {v}"));
            }
        }
        for (key, v) in [("cnn_batch", self.cnn_batch), ("lstm_batch", self.lstm_batch)] {
            if !(1..=4096).contains(&v) {
                return bad(format!("{key} must be in [1, 4096], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad(format!("threshold must be in [0, 1), got {}", self.threshold));
        }
        if !(1..=1_000_000).contains(&self.n_points) {
            return bad(format!("n_points must be in [1, 1000000], got {}", self.n_points));
        }
        Ok(())
    }

    /// The resolved configuration in file syntax, every key present.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key} = {}", self.value(key));
        }
        s
    }

    fn value(&self, key: &str) -> String {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "interval_m" => self.interval_m.to_string(),
            "window" => self.window.to_string(),
            "stride" => self.stride.to_string(),
            "image_size" => self.image_size.to_string(),
            "feature_dim" => self.feature_dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "dense" => self.dense.to_string(),
            "dropout" => self.dropout.to_string(),
            "cnn_lr" => self.cnn_lr.to_string(),
            "lstm_lr" => self.lstm_lr.to_string(),
            "cnn_epochs" => self.cnn_epochs.to_string(),
            "lstm_epochs" => self.lstm_epochs.to_string(),
            "cnn_batch" => self.cnn_batch.to_string(),
            "lstm_batch" => self.lstm_batch.to_string(),
            "threshold" => self.threshold.to_string(),
            "seed" => self.seed.to_string(),
            "n_points" => self.n_points.to_string(),
            "network" => p(&self.network),
            "points" => p(&self.points),
            "labels" => p(&self.labels),
            "features" => p(&self.features),
            "manifest" => p(&self.manifest),
            "cnn_model" => p(&self.cnn_model),
            "lstm_model" => p(&self.lstm_model),
            "predictions" => p(&self.predictions),
            "metrics" => p(&self.metrics),
            "map" => p(&self.map),
            "history" => p(&self.history),
            _ => unreachable!("unknown key {key}"),
        }
    }
}
