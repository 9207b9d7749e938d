//! Training configuration: flat `key = value` text format with fail-closed
//! parsing, CLI overrides, and the desk/paper dimension presets.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where duration targets come from during training: the corpus ground truth
/// or monotonic alignment search over learned scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationSource {
    Oracle,
    Mas,
}

impl std::fmt::Display for DurationSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DurationSource::Oracle => write!(f, "oracle"),
            DurationSource::Mas => write!(f, "mas"),
        }
    }
}

/// Named dimension presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimsPreset {
    /// Minutes-scale CPU training.
    Desk,
    /// 256-dim embeddings and a full-size encoder; constructible but far too
    /// slow for the test suite.
    Paper,
}

impl std::fmt::Display for DimsPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DimsPreset::Desk => write!(f, "desk"),
            DimsPreset::Paper => write!(f, "paper"),
        }
    }
}

/// Concrete model dimensions derived from a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub rel_window: usize,
}

impl DimsPreset {
    pub fn dims(&self) -> ModelDims {
        match self {
            DimsPreset::Desk => ModelDims {
                embed_dim: 32,
                hidden_dim: 32,
                num_blocks: 2,
                num_heads: 2,
                ffn_dim: 64,
                rel_window: 4,
            },
            DimsPreset::Paper => ModelDims {
                embed_dim: 256,
                hidden_dim: 192,
                num_blocks: 6,
                num_heads: 2,
                ffn_dim: 768,
                rel_window: 4,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    /// Linear learning-rate decay: the rate at `total_steps` is
    /// `learning_rate * lr_final_fraction`.
    pub lr_final_fraction: f64,
    pub momentum: f64,
    /// L2 weight decay; keeps the adversarial classifier bounded.
    pub weight_decay: f64,
    pub seed: u64,
    pub w_dur: f64,
    pub w_reg: f64,
    pub enable_dat: bool,
    pub enable_reg_loss: bool,
    pub share_speaker_projection: bool,
    pub duration_source: DurationSource,
    pub dims: DimsPreset,
    pub lambda_steepness: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 16,
            total_steps: 300,
            learning_rate: 0.02,
            lr_final_fraction: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
            seed: 42,
            w_dur: 1.0,
            w_reg: 1.0,
            enable_dat: true,
            enable_reg_loss: true,
            share_speaker_projection: true,
            duration_source: DurationSource::Oracle,
            dims: DimsPreset::Desk,
            lambda_steepness: 10.0,
            checkpoint_every: 100,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1".to_string()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("lr_final_fraction", self.lr_final_fraction),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("w_dur", self.w_dur),
            ("w_reg", self.w_reg),
            ("lambda_steepness", self.lambda_steepness),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Canonical flat-text serialization; `parse_config` inverts it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "lr_final_fraction = {}", self.lr_final_fraction);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "w_dur = {}", self.w_dur);
        let _ = writeln!(s, "w_reg = {}", self.w_reg);
        let _ = writeln!(s, "enable_dat = {}", self.enable_dat);
        let _ = writeln!(s, "enable_reg_loss = {}", self.enable_reg_loss);
        let _ = writeln!(s, "share_speaker_projection = {}", self.share_speaker_projection);
        let _ = writeln!(s, "duration_source = {}", self.duration_source);
        let _ = writeln!(s, "dims = {}", self.dims);
        let _ = writeln!(s, "lambda_steepness = {}", self.lambda_steepness);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }

    /// Apply one `key=value` override. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::config(format!("invalid value {value:?} for {key}"))
            })
        }
        let value = value.trim();
        match key.trim() {
            "batch_size" => self.batch_size = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "lr_final_fraction" => self.lr_final_fraction = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "w_dur" => self.w_dur = num(key, value)?,
            "w_reg" => self.w_reg = num(key, value)?,
            "enable_dat" => self.enable_dat = num(key, value)?,
            "enable_reg_loss" => self.enable_reg_loss = num(key, value)?,
            "share_speaker_projection" => self.share_speaker_projection = num(key, value)?,
            "duration_source" => {
                self.duration_source = match value {
                    "oracle" => DurationSource::Oracle,
                    "mas" => DurationSource::Mas,
                    other => {
                        return Err(Error::config(format!(
                            "duration_source must be 'oracle' or 'mas', got {other:?}"
                        )))
                    }
                }
            }
            "dims" => {
                self.dims = match value {
                    "desk" => DimsPreset::Desk,
                    "paper" => DimsPreset::Paper,
                    other => {
                        return Err(Error::config(format!(
                            "dims must be 'desk' or 'paper', got {other:?}"
                        )))
                    }
                }
            }
            "lambda_steepness" => self.lambda_steepness = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            unknown => {
                return Err(Error::config(format!("unknown config key {unknown:?}")));
            }
        }
        Ok(())
    }
}

/// Parse the flat `key = value` format. Blank lines and `#` comments are
/// allowed; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<TrainingConfig> {
    let mut cfg = TrainingConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected 'key = value', got {raw:?}"),
        })?;
        cfg.set(key, value).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut cfg = TrainingConfig::default();
        cfg.learning_rate = 0.125;
        cfg.enable_dat = false;
        cfg.duration_source = DurationSource::Mas;
        let parsed = parse_config(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_keys_fail_closed() {
        let err = parse_config("batch_sizes = 4\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let cfg = parse_config("# comment\n\nseed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn invalid_values_are_reported_with_line() {
        match parse_config("seed = banana\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_weights_rejected() {
        let mut cfg = TrainingConfig::default();
        cfg.w_reg = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desk_dims_divisible_by_heads() {
        let d = DimsPreset::Desk.dims();
        assert_eq!(d.hidden_dim % d.num_heads, 0);
        let p = DimsPreset::Paper.dims();
        assert_eq!(p.hidden_dim % p.num_heads, 0);
        assert_eq!(p.embed_dim, 256);
    }
}
