//! Run configuration: presets, plain-text config files, and `--set`
//! overrides.
//!
//! A config file is lines of `section.field = value` (blank lines and `#`
//! comments ignored), where the keys mirror the config struct fields —
//! `train.batch_size`, `unet.base_channels`, and so on. Files and overrides
//! both start from the `default` preset; overrides are applied last and win.

use std::path::Path;

use crate::codec::{CodecTrainConfig, LatentCodecConfig};
use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;
use crate::recognizer::{RecognizerConfig, RecognizerTrainConfig};
use crate::schedule::{SamplerKind, ScheduleKind};
use crate::synth::DegradationConfig;
use crate::unet::GuidedUNetConfig;

/// Synthetic-corpus generation settings for the `synth` command.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSettings {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub degradation: DegradationConfig,
    /// Fraction of pairs held out for evaluation, in [0, 1).
    pub holdout: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            count: 2000,
            min_len: 3,
            max_len: 8,
            degradation: DegradationConfig::default(),
            holdout: 0.1,
        }
    }
}

/// Everything a CLI run needs, gathered from a preset, an optional file,
/// and `--set` overrides.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub unet: GuidedUNetConfig,
    pub codec: LatentCodecConfig,
    pub codec_train: CodecTrainConfig,
    pub recognizer: RecognizerConfig,
    pub recog_train: RecognizerTrainConfig,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            unet: GuidedUNetConfig::default(),
            codec: LatentCodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            recognizer: RecognizerConfig::default(),
            recog_train: RecognizerTrainConfig::default(),
            synth: SynthSettings::default(),
        }
    }
}

impl RunConfig {
    /// Known preset names: `default`/`paper` (full-scale) and `desk`.
    pub fn preset(name: &str) -> Option<RunConfig> {
        match name {
            "default" | "paper" => Some(RunConfig::default()),
            "desk" => Some(RunConfig::desk()),
            _ => None,
        }
    }

    /// Workstation recipe: thin denoiser with self-attention only in the two
    /// deep stages, short schedule, small codec and recognizer; finishes on
    /// one CPU core in a couple of hours rather than weeks. Shallow-stage
    /// self-attention runs over the full 16x64 latent grid (1024 tokens), so
    /// it dominates both time and peak memory at any batch size; the deep
    /// stages see 16x fewer tokens and keep their global mixing.
    pub fn desk() -> RunConfig {
        let mut c = RunConfig::default();
        c.train = TrainConfig::desk();
        c.unet.base_channels = 32;
        c.unet.num_heads = 4;
        c.unet.sa_block_ids = vec![3, 4];
        c.codec.hidden_channels = 16;
        c.codec_train.epochs = 10;
        c.recognizer.conv_channels = [16, 32, 48, 48];
        c.recognizer.gru_hidden = 64;
        c
    }

    /// Resolves `--config`: a preset name, else a path to a key-value file
    /// applied on top of the default preset.
    pub fn load(spec: &str) -> Result<RunConfig> {
        if let Some(c) = RunConfig::preset(spec) {
            return Ok(c);
        }
        let path = Path::new(spec);
        if !path.exists() {
            return Err(Error::InvalidConfig(format!(
                "'{spec}' is neither a preset (default, paper, desk) nor a config file"
            )));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = split_pair(line).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.unet.validate()?;
        self.codec.validate()?;
        self.recognizer.validate()?;
        if self.unet.alphabet_size != self.recognizer.alphabet.size() {
            return Err(Error::InvalidConfig(format!(
                "unet.alphabet_size ({}) must match the recognizer alphabet ({})",
                self.unet.alphabet_size,
                self.recognizer.alphabet.size()
            )));
        }
        if self.unet.latent_channels != self.codec.latent_channels {
            return Err(Error::InvalidConfig(format!(
                "unet.latent_channels ({}) must match codec.latent_channels ({})",
                self.unet.latent_channels, self.codec.latent_channels
            )));
        }
        let s = &self.synth;
        if s.count == 0 || s.min_len == 0 || s.min_len > s.max_len {
            return Err(Error::InvalidConfig(
                "synth.count >= 1 and 1 <= synth.min_len <= synth.max_len required".into(),
            ));
        }
        if !(0.0..1.0).contains(&s.holdout) {
            return Err(Error::InvalidConfig(format!(
                "synth.holdout must be in [0, 1), got {}",
                s.holdout
            )));
        }
        s.degradation.validate()?;
        Ok(())
    }

    /// Applies one `key = value` assignment. Unknown keys are an error that
    /// names the key; unparsable values name both key and reason.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.lambda_recog" => self.train.lambda_recog = parse(key, value)?,
            "train.t_max" => self.train.t_max = parse(key, value)?,
            "train.schedule" => {
                self.train.schedule = match value {
                    "linear" => ScheduleKind::Linear,
                    "cosine" => ScheduleKind::Cosine,
                    _ => return Err(bad(key, "expected 'linear' or 'cosine'")),
                }
            }
            "train.beta_start" => self.train.beta_start = parse(key, value)?,
            "train.beta_end" => self.train.beta_end = parse(key, value)?,
            "train.sampler" => {
                self.train.sampler = match value {
                    "ddim" => SamplerKind::Ddim,
                    "ddpm" => SamplerKind::Ddpm,
                    _ => return Err(bad(key, "expected 'ddim' or 'ddpm'")),
                }
            }
            "train.sample_steps" => self.train.sample_steps = parse(key, value)?,
            "train.eta" => self.train.eta = parse(key, value)?,

            "unet.base_channels" => self.unet.base_channels = parse(key, value)?,
            "unet.channel_mults" => self.unet.channel_mults = parse_list(key, value)?,
            "unet.num_heads" => self.unet.num_heads = parse(key, value)?,
            "unet.rg_block_ids" => {
                self.unet.rg_block_ids = if value == "none" || value.is_empty() {
                    vec![]
                } else {
                    parse_list(key, value)?
                }
            }
            "unet.sa_block_ids" => {
                self.unet.sa_block_ids = if value == "none" || value.is_empty() {
                    vec![]
                } else {
                    parse_list(key, value)?
                }
            }
            "unet.latent_channels" => self.unet.latent_channels = parse(key, value)?,
            "unet.cond_channels" => self.unet.cond_channels = parse(key, value)?,
            "unet.alphabet_size" => self.unet.alphabet_size = parse(key, value)?,

            "codec.image_channels" => self.codec.image_channels = parse(key, value)?,
            "codec.hidden_channels" => self.codec.hidden_channels = parse(key, value)?,
            "codec.latent_channels" => self.codec.latent_channels = parse(key, value)?,
            "codec.codebook_size" => self.codec.codebook_size = parse(key, value)?,
            "codec_train.epochs" => self.codec_train.epochs = parse(key, value)?,
            "codec_train.batch_size" => self.codec_train.batch_size = parse(key, value)?,
            "codec_train.learning_rate" => self.codec_train.learning_rate = parse(key, value)?,

            "recognizer.image_channels" => self.recognizer.image_channels = parse(key, value)?,
            "recognizer.conv_channels" => {
                let v: Vec<usize> = parse_list(key, value)?;
                self.recognizer.conv_channels = v
                    .try_into()
                    .map_err(|_| bad(key, "expected exactly 4 comma-separated values"))?;
            }
            "recognizer.gru_hidden" => self.recognizer.gru_hidden = parse(key, value)?,
            "recognizer.input_height" => self.recognizer.input_height = parse(key, value)?,
            "recognizer.input_width" => self.recognizer.input_width = parse(key, value)?,
            "recog_train.epochs" => self.recog_train.epochs = parse(key, value)?,
            "recog_train.batch_size" => self.recog_train.batch_size = parse(key, value)?,
            "recog_train.learning_rate" => self.recog_train.learning_rate = parse(key, value)?,

            "synth.count" => self.synth.count = parse(key, value)?,
            "synth.min_len" => self.synth.min_len = parse(key, value)?,
            "synth.max_len" => self.synth.max_len = parse(key, value)?,
            "synth.blur_min" => self.synth.degradation.blur_sigma.0 = parse(key, value)?,
            "synth.blur_max" => self.synth.degradation.blur_sigma.1 = parse(key, value)?,
            "synth.noise_min" => self.synth.degradation.noise_std.0 = parse(key, value)?,
            "synth.noise_max" => self.synth.degradation.noise_std.1 = parse(key, value)?,
            "synth.holdout" => self.synth.holdout = parse(key, value)?,

            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }
}

fn split_pair(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

fn bad(key: &str, reason: &str) -> Error {
    Error::BadConfigValue {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, &format!("{e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| bad(key, &format!("{e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_validate() {
        for name in ["default", "paper", "desk"] {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
        }
        assert!(RunConfig::preset("nope").is_none());
        assert_eq!(RunConfig::preset("default").unwrap().train.t_max, 1000);
        assert_eq!(RunConfig::preset("desk").unwrap().unet.base_channels, 32);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let mut c = RunConfig::default();
        match c.set("train.batchsize", "8") {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "train.batchsize"),
            other => panic!("expected UnknownConfigKey, got {other:?}"),
        }
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut c = RunConfig::default();
        match c.set("train.epochs", "many") {
            Err(Error::BadConfigValue { key, .. }) => assert_eq!(key, "train.epochs"),
            other => panic!("expected BadConfigValue, got {other:?}"),
        }
        assert!(c.set("train.sampler", "euler").is_err());
        assert!(c.set("recognizer.conv_channels", "1,2,3").is_err());
    }

    #[test]
    fn files_start_from_default_and_overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\n\ntrain.batch_size = 8\nunet.rg_block_ids = 1,2\n",
        )
        .unwrap();
        let mut c = RunConfig::load(path.to_str().unwrap()).unwrap();
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.unet.rg_block_ids, vec![1, 2]);
        assert_eq!(c.train.epochs, 250); // untouched default
        c.apply_overrides(&[("train.batch_size".into(), "4".into())])
            .unwrap();
        assert_eq!(c.train.batch_size, 4);
        c.apply_overrides(&[("unet.rg_block_ids".into(), "none".into())])
            .unwrap();
        assert!(c.unet.rg_block_ids.is_empty());
        c.apply_overrides(&[("unet.sa_block_ids".into(), "3,4".into())])
            .unwrap();
        assert_eq!(c.unet.sa_block_ids, vec![3, 4]);
    }

    #[test]
    fn malformed_lines_and_missing_files_error() {
        assert!(RunConfig::load("/no/such/file.cfg").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.cfg");
        std::fs::write(&path, "train.batch_size 8\n").unwrap();
        assert!(RunConfig::load(path.to_str().unwrap()).is_err());
    }

    #[test]
    fn cross_field_validation_catches_mismatches() {
        let mut c = RunConfig::default();
        c.set("unet.alphabet_size", "12").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("codec.latent_channels", "5").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("synth.holdout", "1.0").unwrap();
        assert!(c.validate().is_err());
    }
}
