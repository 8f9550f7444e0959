//! Run configuration: model fields plus training, data and output settings,
//! stored as flat `key = value` text.

use std::fmt::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use ccsbesr_core::loss::LossWeights;
use ccsbesr_core::model::{parse_key_values, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// `None` picks 8 at scale 2 and 2 at scale 4.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub weights: LossWeights,
    pub data_dir: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
    pub eval_split: String,
    /// LR patch extents; 0 trains on full frames.
    pub patch_h: usize,
    pub patch_w: usize,
    /// LR stride between patches; 0 means the smaller patch extent.
    pub patch_stride: usize,
    pub augment: bool,
    /// Stops training after this many steps even mid-epoch; 0 disables.
    pub max_steps: usize,
    pub synthetic_count: usize,
    pub synthetic_val_count: usize,
    /// HR extents of generated pairs.
    pub synthetic_h: usize,
    pub synthetic_w: usize,
    pub synthetic_max_disparity: usize,
    pub out_dir: PathBuf,
    pub log_file: String,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 40,
            batch_size: None,
            lr: 3e-4,
            weights: LossWeights::default(),
            data_dir: None,
            train_split: "train".into(),
            val_split: "val".into(),
            eval_split: "test".into(),
            patch_h: 32,
            patch_w: 96,
            patch_stride: 0,
            augment: true,
            max_steps: 0,
            synthetic_count: 8,
            synthetic_val_count: 2,
            synthetic_h: 64,
            synthetic_w: 192,
            synthetic_max_disparity: 8,
            out_dir: PathBuf::from("runs"),
            log_file: "train_log.csv".into(),
            threads: 1,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .ok()
        .with_context(|| format!("bad value for {key}: {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("bad value for {key}: {value:?} (expected true or false)"),
    }
}

impl RunConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size
            .unwrap_or(if self.model.scale == 4 { 2 } else { 8 })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => {
                self.batch_size = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "lr" => self.lr = parse(key, value)?,
            "weight_sr" => self.weights.sr = parse(key, value)?,
            "weight_photometric" => self.weights.photometric = parse(key, value)?,
            "weight_smooth" => self.weights.smooth = parse(key, value)?,
            "weight_cycle" => self.weights.cycle = parse(key, value)?,
            "weight_stereo" => self.weights.stereo = parse(key, value)?,
            "data_dir" => self.data_dir = if value.is_empty() { None } else { Some(value.into()) },
            "train_split" => self.train_split = value.into(),
            "val_split" => self.val_split = value.into(),
            "eval_split" => self.eval_split = value.into(),
            "patch_h" => self.patch_h = parse(key, value)?,
            "patch_w" => self.patch_w = parse(key, value)?,
            "patch_stride" => self.patch_stride = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "synthetic_count" => self.synthetic_count = parse(key, value)?,
            "synthetic_val_count" => self.synthetic_val_count = parse(key, value)?,
            "synthetic_h" => self.synthetic_h = parse(key, value)?,
            "synthetic_w" => self.synthetic_w = parse(key, value)?,
            "synthetic_max_disparity" => self.synthetic_max_disparity = parse(key, value)?,
            "out_dir" => self.out_dir = value.into(),
            "log_file" => self.log_file = value.into(),
            "threads" => self.threads = parse(key, value)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            bail!("epochs must be at least 1");
        }
        if self.batch_size == Some(0) {
            bail!("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("lr must be positive, got {}", self.lr);
        }
        if (self.patch_h == 0) != (self.patch_w == 0) {
            bail!("patch_h and patch_w must both be zero or both positive");
        }
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        let w = &self.weights;
        let put = |s: &mut String, k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put(&mut s, "epochs", &self.epochs);
        match self.batch_size {
            Some(b) => put(&mut s, "batch_size", &b),
            None => put(&mut s, "batch_size", &"auto"),
        }
        put(&mut s, "lr", &format!("{:?}", self.lr));
        put(&mut s, "weight_sr", &format!("{:?}", w.sr));
        put(&mut s, "weight_photometric", &format!("{:?}", w.photometric));
        put(&mut s, "weight_smooth", &format!("{:?}", w.smooth));
        put(&mut s, "weight_cycle", &format!("{:?}", w.cycle));
        put(&mut s, "weight_stereo", &format!("{:?}", w.stereo));
        let data = self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        put(&mut s, "data_dir", &data);
        put(&mut s, "train_split", &self.train_split);
        put(&mut s, "val_split", &self.val_split);
        put(&mut s, "eval_split", &self.eval_split);
        put(&mut s, "patch_h", &self.patch_h);
        put(&mut s, "patch_w", &self.patch_w);
        put(&mut s, "patch_stride", &self.patch_stride);
        put(&mut s, "augment", &self.augment);
        put(&mut s, "max_steps", &self.max_steps);
        put(&mut s, "synthetic_count", &self.synthetic_count);
        put(&mut s, "synthetic_val_count", &self.synthetic_val_count);
        put(&mut s, "synthetic_h", &self.synthetic_h);
        put(&mut s, "synthetic_w", &self.synthetic_w);
        put(&mut s, "synthetic_max_disparity", &self.synthetic_max_disparity);
        put(&mut s, "out_dir", &self.out_dir.display());
        put(&mut s, "log_file", &self.log_file);
        put(&mut s, "threads", &self.threads);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("scale", "4").unwrap();
        cfg.set("weight_stereo", "0.5").unwrap();
        cfg.set("data_dir", "/tmp/x").unwrap();
        cfg.set("augment", "false").unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.batch_size(), 2);
        assert_eq!(RunConfig::default().batch_size(), 8);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_text("epochs = 0").is_err());
        assert!(RunConfig::from_text("lr = -1").is_err());
        assert!(RunConfig::from_text("augment = maybe").is_err());
        assert!(RunConfig::from_text("nonsense = 1").is_err());
        assert!(RunConfig::from_text("patch_h = 0").is_err());
    }
}
