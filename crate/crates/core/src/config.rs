//! Flat `key = value` run configuration with environment overrides.

use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::derive_seed;
use crate::evaluation::DEFAULT_THRESHOLD;
use crate::features::FeatureConfig;
use crate::models::{AlphaInit, Architecture, ModelSpec, StitchMode, TrunkLayout};
use crate::synth::SynthConfig;
use crate::training::{LrRangeConfig, TaskWeights, TrainConfig, VelocityLoss};

/// Prefix of environment variables overriding config keys, e.g.
/// `PIANOMTL_LEARNING_RATE`.
pub const ENV_PREFIX: &str = "PIANOMTL_";

const TRAIN_SET_STREAM: u64 = 100;
const VALID_SET_STREAM: u64 = 101;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every setting of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub synth: SynthConfig,
    /// Pieces per synthetic split.
    pub synth_pieces: usize,
    pub valid_pieces: usize,
    pub features: FeatureConfig,
    pub lr_range: LrRangeConfig,
    pub threshold: f64,
    pub data_dir: Option<PathBuf>,
    pub valid_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelSpec::hard_sharing(0),
            synth: SynthConfig::default(),
            synth_pieces: 4,
            valid_pieces: 1,
            features: FeatureConfig::default(),
            lr_range: LrRangeConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            data_dir: None,
            valid_dir: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "learning_rate",
    "momentum",
    "nesterov",
    "batch_size",
    "steps",
    "restart_limit",
    "lambda_on",
    "lambda_int",
    "lambda_off",
    "lambda_vel",
    "lambda_sus",
    "velocity_loss",
    "log_every",
    "validate_every",
    "architecture",
    "stitch_mode",
    "alpha_init",
    "noise_sigma",
    "conv_channels",
    "dense_units",
    "synth_duration",
    "synth_pieces",
    "valid_pieces",
    "polyphony_max",
    "note_rate",
    "sustain_prob",
    "key_min",
    "key_max",
    "velocity_min",
    "velocity_max",
    "sample_rate",
    "n_fft",
    "fps",
    "f_min",
    "f_max",
    "bins_per_semitone",
    "lr_start",
    "lr_end",
    "lr_steps",
    "lr_beta",
    "lr_divergence_factor",
    "tau",
    "data_dir",
    "valid_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_choice<T: Copy>(key: &str, value: &str, choices: &[(&str, T)]) -> Result<T, ConfigError> {
    choices
        .iter()
        .find(|(name, _)| *name == value)
        .map(|&(_, v)| v)
        .ok_or_else(|| ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: format!(
                "expected one of {}",
                choices.iter().map(|c| c.0).collect::<Vec<_>>().join(", ")
            ),
        })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => {
                let seed: u64 = parse(key, v)?;
                self.train.seed = seed;
                self.model.seed = seed;
            }
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "momentum" => self.train.momentum = parse(key, v)?,
            "nesterov" => self.train.nesterov = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "restart_limit" => self.train.restart_limit = parse(key, v)?,
            "lambda_on" => self.train.weights.onset = parse(key, v)?,
            "lambda_int" => self.train.weights.intermediate = parse(key, v)?,
            "lambda_off" => self.train.weights.offset = parse(key, v)?,
            "lambda_vel" => self.train.weights.velocity = parse(key, v)?,
            "lambda_sus" => self.train.weights.sustain = parse(key, v)?,
            "velocity_loss" => {
                self.train.velocity_loss = parse_choice(
                    key,
                    v,
                    &[
                        ("dense", VelocityLoss::Dense),
                        ("onset-masked", VelocityLoss::OnsetMasked),
                    ],
                )?
            }
            "log_every" => self.train.log_every = parse(key, v)?,
            "validate_every" => self.train.validate_every = parse(key, v)?,
            "architecture" => {
                let arch = parse_choice(
                    key,
                    v,
                    &[
                        ("hard-sharing", Architecture::HardSharing),
                        ("cross-stitch", Architecture::CrossStitch),
                    ],
                )?;
                if arch != self.model.architecture {
                    self.model.trunk = match arch {
                        Architecture::HardSharing => TrunkLayout::HARD_SHARING,
                        Architecture::CrossStitch => TrunkLayout::CROSS_STITCH_TOWER,
                    };
                }
                self.model.architecture = arch;
            }
            "stitch_mode" => {
                self.model.stitch_mode = parse_choice(
                    key,
                    v,
                    &[
                        ("full", StitchMode::Full),
                        ("detached", StitchMode::Detached),
                    ],
                )?
            }
            "alpha_init" => {
                self.model.alpha_init = parse_choice(
                    key,
                    v,
                    &[
                        ("balanced", AlphaInit::Balanced),
                        ("imbalanced", AlphaInit::Imbalanced),
                    ],
                )?
            }
            "noise_sigma" => self.model.noise_sigma = parse(key, v)?,
            "conv_channels" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_, _>>()?;
                self.model.trunk.conv_channels =
                    parts.try_into().map_err(|_| ConfigError::BadValue {
                        key: key.into(),
                        value: v.into(),
                        reason: "expected five comma-separated counts".into(),
                    })?;
            }
            "dense_units" => self.model.trunk.dense_units = parse(key, v)?,
            "synth_duration" => self.synth.duration = parse(key, v)?,
            "synth_pieces" => self.synth_pieces = parse(key, v)?,
            "valid_pieces" => self.valid_pieces = parse(key, v)?,
            "polyphony_max" => self.synth.polyphony_max = parse(key, v)?,
            "note_rate" => self.synth.note_rate = parse(key, v)?,
            "sustain_prob" => self.synth.sustain_prob = parse(key, v)?,
            "key_min" => self.synth.key_range.0 = parse(key, v)?,
            "key_max" => self.synth.key_range.1 = parse(key, v)?,
            "velocity_min" => self.synth.velocity_range.0 = parse(key, v)?,
            "velocity_max" => self.synth.velocity_range.1 = parse(key, v)?,
            "sample_rate" => {
                let sr: u32 = parse(key, v)?;
                self.features.sample_rate = sr;
                self.synth.sample_rate = sr;
            }
            "n_fft" => self.features.n_fft = parse(key, v)?,
            "fps" => self.features.fps = parse(key, v)?,
            "f_min" => self.features.f_min = parse(key, v)?,
            "f_max" => {
                self.features.f_max = if v == "nyquist" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "bins_per_semitone" => self.features.bins_per_semitone = parse(key, v)?,
            "lr_start" => self.lr_range.eta_start = parse(key, v)?,
            "lr_end" => self.lr_range.eta_end = parse(key, v)?,
            "lr_steps" => self.lr_range.max_steps = parse(key, v)?,
            "lr_beta" => self.lr_range.beta = parse(key, v)?,
            "lr_divergence_factor" => self.lr_range.divergence_factor = parse(key, v)?,
            "tau" => self.threshold = parse(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "valid_dir" => self.valid_dir = Some(PathBuf::from(v)),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `PIANOMTL_<KEY>` overrides found through `lookup`.
    pub fn apply_env(
        &mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<(), ConfigError> {
        for key in KEYS {
            if let Some(v) = lookup(&format!("{ENV_PREFIX}{}", key.to_uppercase())) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    /// Defaults, then the file text, then the environment.
    pub fn load(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.apply_env(lookup)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.train.validate().map_err(|e| invalid(&e))?;
        self.features.validate().map_err(|e| invalid(&e))?;
        self.synth.validate().map_err(|e| invalid(&e))?;
        self.lr_range.validate().map_err(|e| invalid(&e))?;
        if self.synth.sample_rate != self.features.sample_rate {
            return Err(ConfigError::Invalid(
                "synth and feature sample rates differ".into(),
            ));
        }
        if self.model.trunk.conv_channels.contains(&0) || self.model.trunk.dense_units == 0 {
            return Err(ConfigError::Invalid("layer widths must be positive".into()));
        }
        if !(self.model.noise_sigma >= 0.0 && self.model.noise_sigma.is_finite()) {
            return Err(ConfigError::Invalid(
                "noise_sigma must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError::Invalid("tau must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> TaskWeights {
        self.train.weights
    }

    /// Synth settings for the training or validation split; both derive
    /// from the run seed.
    pub fn synth_split(&self, validation: bool) -> SynthConfig {
        let stream = if validation {
            VALID_SET_STREAM
        } else {
            TRAIN_SET_STREAM
        };
        SynthConfig {
            seed: derive_seed(self.train.seed, stream),
            ..self.synth.clone()
        }
    }
}
