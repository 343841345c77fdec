//! Run configuration: one flat key=value table for every tunable the
//! pipeline exposes, with strict key checking so typos fail loudly.
//!
//! Precedence, lowest to highest: built-in defaults, config file,
//! command-line overrides (each override is just another `set` call).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::association::{AssociationMode, ExplicitWeights};
use crate::error::{Error, Result};
use crate::gru::train::{AdamConfig, TrainOptions};
use crate::gru::{mining::MiningConfig, MAX_SEQUENCE_LEN};
use crate::kalman::MotionModelConfig;
use crate::tracker::TrackerConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    // Association.
    pub mode: AssociationMode,
    pub lambda_iou: f64,
    pub lambda_v: f64,
    pub lambda_a: f64,
    pub lambda_f: f64,
    pub literal_iou: bool,
    // Motion filter.
    pub lambda_c: f64,
    pub gate_threshold: f64,
    pub scale_r_only: bool,
    // Track lifecycle.
    pub n_init: u32,
    pub max_age: u32,
    pub min_confidence: f64,
    pub image_width: f64,
    pub image_height: f64,
    // Recurrent association network and its training.
    pub hidden_size: usize,
    pub sequence_length: usize,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_every_epochs: u32,
    pub batch_size: usize,
    pub epochs: u32,
    pub validation_fraction: f64,
    pub early_stop_auc: f64,
    // Training-pair mining.
    pub iou_positive: f64,
    pub augmentations: usize,
    pub appearance_sigma: f64,
    pub scale_jitter_low: f64,
    pub scale_jitter_high: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: AssociationMode::Implicit,
            lambda_iou: 1.0,
            lambda_v: 1.0,
            lambda_a: 1.0,
            lambda_f: 1.0,
            literal_iou: false,
            lambda_c: 0.5,
            gate_threshold: 9.4877,
            scale_r_only: false,
            n_init: 3,
            max_age: 30,
            min_confidence: 0.0,
            image_width: 1280.0,
            image_height: 720.0,
            hidden_size: 134,
            sequence_length: MAX_SEQUENCE_LEN,
            learning_rate: 0.002,
            decay_rate: 0.1,
            decay_every_epochs: 20,
            batch_size: 64,
            epochs: 50,
            validation_fraction: 0.1,
            early_stop_auc: 0.995,
            iou_positive: 0.5,
            augmentations: 2,
            appearance_sigma: 0.02,
            scale_jitter_low: 0.8,
            scale_jitter_high: 1.2,
            seed: 42,
        }
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys and unparseable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value.trim().parse().map_err(|e| {
                Error::input("config", format!("{key} = '{value}': {e}"))
            })
        }
        let value = value.trim();
        match key.trim() {
            "mode" => self.mode = value.parse()?,
            "lambda_iou" => self.lambda_iou = parse(key, value)?,
            "lambda_v" => self.lambda_v = parse(key, value)?,
            "lambda_a" => self.lambda_a = parse(key, value)?,
            "lambda_f" => self.lambda_f = parse(key, value)?,
            "literal_iou" => self.literal_iou = parse(key, value)?,
            "lambda_c" => self.lambda_c = parse(key, value)?,
            "gate_threshold" => self.gate_threshold = parse(key, value)?,
            "scale_r_only" => self.scale_r_only = parse(key, value)?,
            "n_init" => self.n_init = parse(key, value)?,
            "max_age" => self.max_age = parse(key, value)?,
            "min_confidence" => self.min_confidence = parse(key, value)?,
            "image_width" => self.image_width = parse(key, value)?,
            "image_height" => self.image_height = parse(key, value)?,
            "hidden_size" => self.hidden_size = parse(key, value)?,
            "sequence_length" => self.sequence_length = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "decay_rate" => self.decay_rate = parse(key, value)?,
            "decay_every_epochs" => self.decay_every_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "early_stop_auc" => self.early_stop_auc = parse(key, value)?,
            "iou_positive" => self.iou_positive = parse(key, value)?,
            "augmentations" => self.augmentations = parse(key, value)?,
            "appearance_sigma" => self.appearance_sigma = parse(key, value)?,
            "scale_jitter_low" => self.scale_jitter_low = parse(key, value)?,
            "scale_jitter_high" => self.scale_jitter_high = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => {
                return Err(Error::input(
                    "config",
                    format!("unknown key '{other}'"),
                ));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn merge(&mut self, text: &str) -> Result<()> {
        for (number, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::input(
                    "config",
                    format!("line {}: expected key=value, got '{line}'", number + 1),
                ));
            };
            self.set(key, value)?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| {
            Error::input("config", format!("{}: {e}", path.display()))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sequence_length >= 1 && self.sequence_length <= MAX_SEQUENCE_LEN) {
            return Err(Error::input(
                "config",
                format!(
                    "sequence_length {} outside 1..={MAX_SEQUENCE_LEN}",
                    self.sequence_length
                ),
            ));
        }
        if self.hidden_size == 0 {
            return Err(Error::input("config", "hidden_size must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::input("config", "batch_size must be positive"));
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::input(
                "config",
                format!("validation_fraction {} outside [0, 1)", self.validation_fraction),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::input("config", "learning_rate must be positive"));
        }
        self.tracker_config().validate()
    }

    pub fn weights(&self) -> ExplicitWeights {
        ExplicitWeights {
            lambda_iou: self.lambda_iou,
            lambda_v: self.lambda_v,
            lambda_a: self.lambda_a,
            lambda_f: self.lambda_f,
            literal_iou: self.literal_iou,
        }
    }

    pub fn motion_config(&self) -> MotionModelConfig {
        MotionModelConfig {
            lambda_c: self.lambda_c,
            gate_threshold: self.gate_threshold,
            scale_r_only: self.scale_r_only,
            ..MotionModelConfig::default()
        }
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            mode: self.mode,
            motion: self.motion_config(),
            weights: self.weights(),
            n_init: self.n_init,
            max_age: self.max_age,
            min_confidence: self.min_confidence,
            history_length: self.sequence_length - 1,
            image_size: (self.image_width, self.image_height),
        }
    }

    pub fn mining_config(&self) -> MiningConfig {
        MiningConfig {
            iou_positive: self.iou_positive,
            history_length: self.sequence_length - 1,
            augmentations: self.augmentations,
            scale_jitter: (self.scale_jitter_low, self.scale_jitter_high),
            appearance_sigma: self.appearance_sigma,
            image_size: (self.image_width, self.image_height),
            seed: self.seed,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            decay_rate: self.decay_rate,
            decay_every_epochs: self.decay_every_epochs,
            ..AdamConfig::default()
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
            early_stop_auc: Some(self.early_stop_auc),
        }
    }
}
