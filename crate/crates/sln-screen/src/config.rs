//! Flat `key = value` configuration overriding the model and training
//! defaults. Lines starting with `#` are comments; unknown keys are
//! rejected; every default is printable.

use std::fs;
use std::path::Path;

use crate::corpus::PATCH_SIDE;
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::optim::OptimizerKind;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub conv_channels: Vec<usize>,
    pub dense_width: usize,
    pub dropout_rate: f64,
    pub class_count: usize,
    pub model_seed: u64,
    pub train: TrainConfig,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            conv_channels: vec![16, 32, 64, 128],
            dense_width: 256,
            dropout_rate: 0.5,
            class_count: 4,
            model_seed: 17,
            train: TrainConfig::default(),
        }
    }
}

impl PipelineSettings {
    pub fn model_config(&self) -> ModelConfig {
        let mut config = ModelConfig::with_input(
            [PATCH_SIDE, PATCH_SIDE, 3],
            &self.conv_channels,
            self.dense_width,
            self.dropout_rate,
            self.model_seed,
        );
        config.class_count = self.class_count;
        config
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone()
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::InvalidConfigValue {
                key: line.to_string(),
                value: String::new(),
                reason: "expected key = value".into(),
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |reason: &str| Error::InvalidConfigValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        match key {
            "conv_channels" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|v| v.trim().parse()).collect();
                let channels = parsed.map_err(|_| bad("expected comma-separated widths"))?;
                if channels.is_empty() || channels.contains(&0) {
                    return Err(bad("widths must be positive"));
                }
                self.conv_channels = channels;
            }
            "dense_width" => self.dense_width = value.parse().map_err(|_| bad("expected a positive integer"))?,
            "dropout_rate" => {
                let rate: f64 = value.parse().map_err(|_| bad("expected a number"))?;
                if !(0.0..1.0).contains(&rate) {
                    return Err(bad("must be in [0, 1)"));
                }
                self.dropout_rate = rate;
            }
            "class_count" => self.class_count = value.parse().map_err(|_| bad("expected an integer"))?,
            "model_seed" => self.model_seed = value.parse().map_err(|_| bad("expected an integer"))?,
            "train_seed" => self.train.seed = value.parse().map_err(|_| bad("expected an integer"))?,
            "batch_size" => self.train.batch_size = value.parse().map_err(|_| bad("expected a positive integer"))?,
            "max_epochs" => self.train.max_epochs = value.parse().map_err(|_| bad("expected a positive integer"))?,
            "patience" => self.train.patience = value.parse().map_err(|_| bad("expected a positive integer"))?,
            "learning_rate" => {
                self.train.optimizer.learning_rate = value.parse().map_err(|_| bad("expected a number"))?
            }
            "optimizer" => {
                self.train.optimizer.kind = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(bad("expected adam or sgd")),
                }
            }
            "augment_hflip" => self.train.augment_hflip = parse_bool(value).ok_or_else(|| bad("expected true or false"))?,
            "augment_vflip" => self.train.augment_vflip = parse_bool(value).ok_or_else(|| bad("expected true or false"))?,
            _ => {
                return Err(Error::UnknownConfigKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Every key with its current value, one per line, valid as a config
    /// file.
    pub fn dump(&self) -> String {
        let channels: Vec<String> = self.conv_channels.iter().map(|c| c.to_string()).collect();
        let mut out = String::new();
        out.push_str(&format!("conv_channels = {}\n", channels.join(",")));
        out.push_str(&format!("dense_width = {}\n", self.dense_width));
        out.push_str(&format!("dropout_rate = {}\n", self.dropout_rate));
        out.push_str(&format!("class_count = {}\n", self.class_count));
        out.push_str(&format!("model_seed = {}\n", self.model_seed));
        out.push_str(&format!("train_seed = {}\n", self.train.seed));
        out.push_str(&format!("batch_size = {}\n", self.train.batch_size));
        out.push_str(&format!("max_epochs = {}\n", self.train.max_epochs));
        out.push_str(&format!("patience = {}\n", self.train.patience));
        out.push_str(&format!("learning_rate = {}\n", self.train.optimizer.learning_rate));
        out.push_str(&format!(
            "optimizer = {}\n",
            match self.train.optimizer.kind {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
        ));
        out.push_str(&format!("augment_hflip = {}\n", self.train.augment_hflip));
        out.push_str(&format!("augment_vflip = {}\n", self.train.augment_vflip));
        out
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}
