//! Flat `key=value` configuration files and the training configuration.

use crate::error::{CoreError, Result};
use crate::lfsp::OdeConfig;
use crate::model::{parse_value, ModelConfig, SIDE_MULTIPLE};
use crate::speckle::Looks;

/// Parses one `key=value` per line; blank lines and `#` comments are
/// skipped, as is anything after a `#` on a line.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CoreError::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub looks: f64,
    pub seed: u64,
    /// Cap on the number of patches drawn from the corpus; 0 keeps all.
    pub max_patches: usize,
    /// Share of the patches held out for validation.
    pub val_fraction: f64,
    pub augment: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr_start: 1e-3,
            lr_end: 1e-6,
            batch_size: 8,
            patch_size: 64,
            looks: 1.0,
            seed: 0,
            max_patches: 0,
            val_fraction: 0.1,
            augment: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-size regime: 128 channels, four solver steps, 128px patches and
    /// 20 epochs.
    pub fn full_scale() -> Self {
        Self {
            epochs: 20,
            patch_size: 128,
            model: ModelConfig {
                channels: 128,
                ode: OdeConfig {
                    steps: 4,
                    ..OdeConfig::default()
                },
                train_size: 128,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return bad(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(SIDE_MULTIPLE) {
            return bad(format!(
                "patch_size must be a positive multiple of {SIDE_MULTIPLE}, got {}",
                self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        Looks::new(self.looks)?;
        self.model.validate()
    }

    /// Sets a training or model field by its snake_case name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr_start" => self.lr_start = parse_value(key, value)?,
            "lr_end" => self.lr_end = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "patch_size" => {
                self.patch_size = parse_value(key, value)?;
                self.model.train_size = self.patch_size;
            }
            "looks" => self.looks = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "max_patches" => self.max_patches = parse_value(key, value)?,
            "val_fraction" => self.val_fraction = parse_value(key, value)?,
            "augment" => self.augment = parse_value(key, value)?,
            _ => {
                if !self.model.set(key, value)? {
                    return Err(CoreError::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_kv(text)?)?;
        Ok(cfg)
    }

    /// Training fields as `key=value` lines (model fields excluded).
    pub fn header(&self) -> String {
        [
            ("epochs", self.epochs.to_string()),
            ("lr_start", format!("{:?}", self.lr_start)),
            ("lr_end", format!("{:?}", self.lr_end)),
            ("batch_size", self.batch_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("looks", format!("{:?}", self.looks)),
            ("seed", self.seed.to_string()),
            ("max_patches", self.max_patches.to_string()),
            ("val_fraction", format!("{:?}", self.val_fraction)),
            ("augment", self.augment.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
    }
}
