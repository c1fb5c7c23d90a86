//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_tv: f64,
    pub lambda_contrast: f64,
    pub lambda_unimodal: f64,
    pub n_frames: usize,
    pub n_classes: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub hidden: usize,
    pub energy_width: usize,
    pub mask_width1: usize,
    pub mask_width2: usize,
    pub mask_bias: f64,
    pub mean_aggregate: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Gradients with a larger global L2 norm are rescaled to it; 0 disables.
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let lambda = LossWeights::default();
        let model = ModelConfig::default();
        Self {
            lambda_tv: lambda.tv,
            lambda_contrast: lambda.contrast,
            lambda_unimodal: lambda.unimodal,
            n_frames: model.n_frames,
            n_classes: model.n_classes,
            frame_height: model.frame_size.0,
            frame_width: model.frame_size.1,
            in_channels: model.in_channels,
            encoder_channels: model.encoder_channels,
            hidden: model.hidden,
            energy_width: model.energy_width,
            mask_width1: model.mask_widths.0,
            mask_width2: model.mask_widths.1,
            mask_bias: model.mask_bias,
            mean_aggregate: model.mean_aggregate,
            learning_rate: 0.02,
            momentum: 0.9,
            grad_clip: 5.0,
            epochs: 40,
            batch_size: 4,
            seed: 1,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in serialization order.
pub const KEYS: [&str; 21] = [
    "lambda_tv",
    "lambda_contrast",
    "lambda_unimodal",
    "n_frames",
    "n_classes",
    "frame_height",
    "frame_width",
    "in_channels",
    "encoder_channels",
    "hidden",
    "energy_width",
    "mask_width1",
    "mask_width2",
    "mask_bias",
    "mean_aggregate",
    "learning_rate",
    "momentum",
    "grad_clip",
    "epochs",
    "batch_size",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            tv: self.lambda_tv,
            contrast: self.lambda_contrast,
            unimodal: self.lambda_unimodal,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.in_channels,
            frame_size: (self.frame_height, self.frame_width),
            encoder_channels: self.encoder_channels.clone(),
            n_frames: self.n_frames,
            n_classes: self.n_classes,
            hidden: self.hidden,
            energy_width: self.energy_width,
            mask_widths: (self.mask_width1, self.mask_width2),
            mean_aggregate: self.mean_aggregate,
            mask_bias: self.mask_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        self.model_config().validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip must be finite and >= 0, got {}", self.grad_clip)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "lambda_tv" => self.lambda_tv = parse(key, value)?,
            "lambda_contrast" => self.lambda_contrast = parse(key, value)?,
            "lambda_unimodal" => self.lambda_unimodal = parse(key, value)?,
            "n_frames" => self.n_frames = parse(key, value)?,
            "n_classes" => self.n_classes = parse(key, value)?,
            "frame_height" => self.frame_height = parse(key, value)?,
            "frame_width" => self.frame_width = parse(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "encoder_channels" => {
                self.encoder_channels = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?
                }
            }
            "hidden" => self.hidden = parse(key, value)?,
            "energy_width" => self.energy_width = parse(key, value)?,
            "mask_width1" => self.mask_width1 = parse(key, value)?,
            "mask_width2" => self.mask_width2 = parse(key, value)?,
            "mask_bias" => self.mask_bias = parse(key, value)?,
            "mean_aggregate" => self.mean_aggregate = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// One `key = value` line per field. Floats use the shortest text that
    /// parses back to the same value.
    pub fn to_text(&self) -> String {
        let encoder: Vec<String> = self.encoder_channels.iter().map(usize::to_string).collect();
        let values = [
            self.lambda_tv.to_string(),
            self.lambda_contrast.to_string(),
            self.lambda_unimodal.to_string(),
            self.n_frames.to_string(),
            self.n_classes.to_string(),
            self.frame_height.to_string(),
            self.frame_width.to_string(),
            self.in_channels.to_string(),
            encoder.join(","),
            self.hidden.to_string(),
            self.energy_width.to_string(),
            self.mask_width1.to_string(),
            self.mask_width2.to_string(),
            self.mask_bias.to_string(),
            self.mean_aggregate.to_string(),
            self.learning_rate.to_string(),
            self.momentum.to_string(),
            self.grad_clip.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
        ];
        let mut out = String::new();
        for (key, value) in KEYS.iter().zip(values) {
            writeln!(out, "{key} = {value}").unwrap();
        }
        out
    }

    /// Applies `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda_tv, c.lambda_contrast, c.lambda_unimodal), (1e-5, 1e-4, 1.0));
        assert_eq!((c.n_frames, c.hidden), (8, 16));
        assert!(c.mean_aggregate);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trips_exactly() {
        let mut c = TrainConfig::default();
        c.learning_rate = 0.1 + 0.2;
        c.lambda_tv = 1.0 / 3.0;
        c.mask_bias = -1.25e-7;
        c.encoder_channels = vec![4, 6];
        c.seed = u64::MAX;
        c.mean_aggregate = false;
        let text = c.to_text();
        let back = TrainConfig::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn comments_and_partial_files() {
        let c = TrainConfig::from_text("# tuned\n\nepochs = 3\n  learning_rate=0.5  \nencoder_channels =\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.learning_rate, 0.5);
        assert!(c.encoder_channels.is_empty());
        assert_eq!(c.hidden, TrainConfig::default().hidden);
    }

    #[test]
    fn bad_input_is_config_error() {
        assert!(matches!(TrainConfig::from_text("epochs 3"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_text("epoch = 3"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_text("epochs = -3"), Err(Error::Config(_))));
        let c = TrainConfig::from_text("momentum = 1.5").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = TrainConfig::from_text("lambda_tv = -1").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
