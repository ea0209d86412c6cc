//! Training configuration, its JSON form and `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Degradation, JigsawGeometry};
use crate::error::{Error, Result};
use crate::model::{BackboneKind, BnPolicy, ModelConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Episodic,
    Standard,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslTask {
    #[default]
    None,
    Jigsaw,
    Rotation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// One uniformly drawn angle per image.
    #[default]
    OnePerImage,
    /// All four rotations of every image.
    AllFour,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub ssl_task: SslTask,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    /// Optimizer steps in episodic mode.
    pub episodes: usize,
    /// Passes over the training images in standard mode.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub rotation_mode: RotationMode,
    pub degrade: Degradation,

    pub backbone: BackboneKind,
    pub widths: Vec<usize>,
    pub bn_policy: BnPolicy,
    /// Side of the square network input.
    pub image_size: usize,
    /// Side of one jigsaw tile; 64 gives the 255 / 85 / 64 geometry.
    pub jigsaw_tile: usize,
    pub permset_size: usize,

    /// Validate every this many episodic steps; standard mode validates once per epoch.
    pub val_every: usize,
    pub val_episodes: usize,
    /// Record the ids of the images behind every step in the log.
    pub log_image_ids: bool,

    pub dataset: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub permset: Option<PathBuf>,
    /// base:val:novel class ratio used when no split file is given.
    pub split_ratio: [u32; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Episodic,
            ssl_task: SslTask::None,
            n_way: 5,
            k_shot: 5,
            m_query: 16,
            episodes: 40_000,
            epochs: 400,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            rotation_mode: RotationMode::OnePerImage,
            degrade: Degradation::None,
            backbone: BackboneKind::PaperResnet18,
            widths: vec![64; 4],
            bn_policy: BnPolicy::PerBatch,
            image_size: 224,
            jigsaw_tile: 64,
            permset_size: 35,
            val_every: 500,
            val_episodes: 100,
            log_image_ids: false,
            dataset: None,
            split: None,
            permset: None,
            split_ratio: [2, 1, 1],
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::parse("train config", &e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Reads `path`, applies `key=value` overrides, then validates.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::parse("train config", &e))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn jigsaw_geometry(&self) -> JigsawGeometry {
        if self.jigsaw_tile == 64 {
            JigsawGeometry::full_size()
        } else {
            JigsawGeometry::for_tile(self.jigsaw_tile)
        }
    }

    /// Architecture implied by the training setup. `num_classes` is only
    /// used in standard mode; `permset_len` sizes the jigsaw head.
    pub fn model_config(&self, num_classes: usize, permset_len: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            widths: self.widths.clone(),
            bn_policy: self.bn_policy,
            num_classes: (self.mode == TrainMode::Standard).then_some(num_classes),
            jigsaw_classes: (self.ssl_task == SslTask::Jigsaw).then_some(permset_len),
            rotation: self.ssl_task == SslTask::Rotation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.ssl_task != SslTask::None && self.bn_policy != BnPolicy::PerBatch {
            return fail(format!(
                "ssl_task {:?} requires bn_policy per_batch, got {:?}",
                self.ssl_task, self.bn_policy
            ));
        }
        match self.mode {
            TrainMode::Episodic => {
                if self.n_way < 2 || self.k_shot == 0 || self.m_query == 0 {
                    return fail("episodic mode needs n_way >= 2, k_shot >= 1 and m_query >= 1".into());
                }
            }
            TrainMode::Standard => {
                if self.batch_size == 0 {
                    return fail("standard mode needs batch_size >= 1".into());
                }
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.image_size == 0 || self.val_every == 0 {
            return fail("image_size and val_every must be >= 1".into());
        }
        if self.ssl_task == SslTask::Jigsaw {
            self.jigsaw_geometry().validate()?;
            if self.permset_size == 0 {
                return fail("permset_size must be >= 1".into());
            }
        }
        if self.split_ratio.iter().all(|&r| r == 0) {
            return fail("split_ratio must not be all zero".into());
        }
        self.model_config(1, self.permset_size.max(1)).validate()
    }
}

/// Sets `key` (dot-separated for nested objects) to `value`. The value is
/// parsed as JSON and falls back to a plain string.
pub fn apply_override(config: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = config;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` does not address an object")))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not address an object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.n_way, c.k_shot, c.m_query), (5, 5, 16));
        assert_eq!((c.episodes, c.epochs, c.batch_size), (40_000, 400, 16));
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.jigsaw_geometry(), JigsawGeometry::full_size());
        c.validate().unwrap();
    }

    #[test]
    fn ssl_with_running_stats_is_rejected() {
        let c = TrainConfig::from_json(r#"{"ssl_task": "jigsaw", "bn_policy": "running_stats"}"#);
        assert!(matches!(c, Err(Error::Config(_))));
        TrainConfig::from_json(r#"{"ssl_task": "none", "bn_policy": "running_stats"}"#).unwrap();
    }

    #[test]
    fn unknown_fields_and_bad_json_fail() {
        assert!(TrainConfig::from_json(r#"{"n_wya": 5}"#).is_err());
        match TrainConfig::from_json("{\n  \"n_way\": }") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides() {
        let mut v = serde_json::json!({"n_way": 5});
        apply_override(&mut v, "n_way=20").unwrap();
        apply_override(&mut v, "ssl_task=rotation").unwrap();
        apply_override(&mut v, "widths=[8,8]").unwrap();
        let c: TrainConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.n_way, 20);
        assert_eq!(c.ssl_task, SslTask::Rotation);
        assert_eq!(c.widths, vec![8, 8]);
        assert!(apply_override(&mut serde_json::json!({}), "novalue").is_err());
    }

    #[test]
    fn model_config_follows_task() {
        let c = TrainConfig {
            mode: TrainMode::Standard,
            ssl_task: SslTask::Jigsaw,
            ..Default::default()
        };
        let m = c.model_config(7, 35);
        assert_eq!(m.num_classes, Some(7));
        assert_eq!(m.jigsaw_classes, Some(35));
        assert!(!m.rotation);
    }
}
