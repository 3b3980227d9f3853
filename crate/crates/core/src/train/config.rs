//! Declarative configuration. Sections `[model]`, `[train]` and
//! `[inference]`; every key may also be written flat as `section.key = v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: u64,
    /// Patch pairs per iteration.
    pub patches: usize,
    /// Streamlines per patch.
    pub patch_streamlines: usize,
    /// Points per streamline after resampling.
    pub points: usize,
    pub learning_rate: f64,
    /// Multiplicative step decay of the learning rate.
    pub decay: f64,
    /// Epochs between decays.
    pub decay_every: u64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Epochs between periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 1000,
            patches: 4,
            patch_streamlines: 2200,
            points: 15,
            learning_rate: 1e-3,
            decay: 0.5,
            decay_every: 10,
            lambda_min: 1e-3,
            lambda_max: 10.0,
            clip_norm: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSettings {
    /// TPS regularisation used at registration time.
    pub lambda: f64,
    /// Streamlines per subject used for keypoint detection.
    pub subset: usize,
    pub subset_seed: u64,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings {
            lambda: 0.5,
            subset: 30_000,
            subset_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub inference: InferenceSettings,
}

fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

/// Line declaring `section.key`, either flat or inside `[section]`.
fn line_of_key(text: &str, section: &str, key: &str) -> usize {
    let flat = format!("{section}.{key}");
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = s.trim().to_string();
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        if k == flat || (current == section && k == key) {
            return i + 1;
        }
    }
    0
}

impl TrainConfig {
    /// Parses and validates a config file. Errors carry the offending line.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `section.key=value` overrides on top.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: TrainConfig =
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config {
                    line: 0,
                    message: e.message().to_string(),
                })?;
        cfg.validate().map_err(|e| match e {
            Error::Config { line: _, message } => {
                let line = message
                    .split_once(':')
                    .and_then(|(path, _)| path.split_once('.'))
                    .map(|(s, k)| line_of_key(text, s, k))
                    .unwrap_or(0);
                Error::Config { line, message }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    /// Canonical TOML form, as echoed into checkpoints.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Error::Config {
            line: 0,
            message: format!("{key}: {why}"),
        };
        self.model
            .validate()
            .map_err(|e| bad("model.config", e.to_string()))?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(bad("train.epochs", "must be positive".into()));
        }
        if t.patches == 0 {
            return Err(bad("train.patches", "must be positive".into()));
        }
        if t.patch_streamlines == 0 {
            return Err(bad("train.patch_streamlines", "must be positive".into()));
        }
        if t.points < 2 {
            return Err(bad("train.points", "need at least 2 points".into()));
        }
        if !(t.learning_rate > 0.0) || !t.learning_rate.is_finite() {
            return Err(bad("train.learning_rate", format!("{} is not positive", t.learning_rate)));
        }
        if !(t.decay > 0.0 && t.decay <= 1.0) {
            return Err(bad("train.decay", format!("{} is outside (0, 1]", t.decay)));
        }
        if t.decay_every == 0 {
            return Err(bad("train.decay_every", "must be positive".into()));
        }
        if !(t.lambda_min > 0.0) || !(t.lambda_max >= t.lambda_min) || !t.lambda_max.is_finite() {
            return Err(bad(
                "train.lambda_min",
                format!("range [{}, {}] is invalid", t.lambda_min, t.lambda_max),
            ));
        }
        if !(t.clip_norm >= 0.0) {
            return Err(bad("train.clip_norm", "must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(bad("train.beta1", "betas must lie in [0, 1)".into()));
        }
        if !(t.epsilon > 0.0) {
            return Err(bad("train.epsilon", "must be positive".into()));
        }
        if t.checkpoint_every == 0 {
            return Err(bad("train.checkpoint_every", "must be positive".into()));
        }
        let i = &self.inference;
        if !(i.lambda >= 0.0) || !i.lambda.is_finite() {
            return Err(bad("inference.lambda", format!("{} is invalid", i.lambda)));
        }
        if i.subset == 0 {
            return Err(bad("inference.subset", "must be positive".into()));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let bad = |m: String| Error::Config { line: 0, message: m };
    let (path, raw) = ov
        .split_once('=')
        .ok_or_else(|| bad(format!("override {ov:?} is not key=value")))?;
    let parts: Vec<&str> = path.trim().split('.').collect();
    let value: toml::Value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for s in sections {
        cur = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| bad(format!("{s} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.model.keypoints, 512);
        assert_eq!(c.model.temperature, 0.6);
        assert_eq!(c.train.patches, 4);
        assert_eq!(c.train.patch_streamlines, 2200);
        assert_eq!(c.train.points, 15);
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.train.decay, 0.5);
        assert_eq!(c.train.decay_every, 10);
        assert_eq!(c.train.epochs, 1000);
        assert_eq!(c.inference.lambda, 0.5);
        assert_eq!(c.inference.subset, 30_000);
    }

    #[test]
    fn sections_and_flat_keys() {
        let c = TrainConfig::from_toml_str("train.epochs = 7\n\n[model]\nkeypoints = 32\n").unwrap();
        assert_eq!(c.model.keypoints, 32);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.model.hidden, 64);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = TrainConfig::default();
        c.train.seed = 99;
        c.model.hidden = 8;
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn zero_decay_rejected_with_line() {
        let text = "[model]\nkeypoints = 32\n[train]\nepochs = 3\ndecay = 0\n";
        match TrainConfig::from_toml_str(text) {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 5, "{message}");
                assert!(message.contains("decay"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_line() {
        match TrainConfig::from_toml_str("[train]\nepochs = 3\nseed = = 1\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(TrainConfig::from_toml_str("[train]\nepocs = 3\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = TrainConfig::from_toml_with_overrides(
            "",
            &["train.learning_rate=0.01".into(), "inference.lambda = 5.0".into()],
        )
        .unwrap();
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.inference.lambda, 5.0);
    }
}
