//! Run configuration: a JSON file mirroring the library's config types,
//! plus `key.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use vitpose_core::codec::GroupConfig;
use vitpose_core::data::{Augment, DatasetSpec};
use vitpose_core::nn::{DecoderKind, ModelConfig, TaskSpec};
use vitpose_core::train::{MimConfig, TrainConfig};

use crate::error::{Error, Result};

/// Where one task's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskData {
    Synthetic {
        images: usize,
        /// Inclusive range of people per image.
        persons: (usize, usize),
        num_keypoints: usize,
        image_hw: (usize, usize),
    },
    Coco {
        spec: DatasetSpec,
        /// Held-out annotations sharing `spec.image_root`; without one the
        /// training annotations are evaluated.
        #[serde(default)]
        val_annotation_path: Option<String>,
    },
}

impl TaskData {
    pub fn num_keypoints(&self) -> usize {
        match self {
            TaskData::Synthetic { num_keypoints, .. } => *num_keypoints,
            TaskData::Coco { spec, .. } => spec.num_keypoints,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// One entry per model task, in task order.
    pub tasks: Vec<TaskData>,
    pub augment: Augment,
    /// Synthetic images held out for evaluation, per task.
    pub val_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            tasks: vec![TaskData::Synthetic {
                images: 64,
                persons: (1, 1),
                num_keypoints: 13,
                image_hw: (64, 48),
            }],
            augment: Augment::default(),
            val_images: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub token_steps: usize,
    pub token_lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            token_steps: 200,
            token_lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub mim: MimConfig,
    pub distill: DistillConfig,
    pub group: GroupConfig,
}

/// Training defaults sized for a laptop run on the synthetic data.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        base_lr: 2e-3,
        weight_decay: 1e-4,
        layer_wise_decay: 0.9,
        drop_path: 0.0,
        batch_size: 16,
        epochs: 60,
        lr_drop_epochs: vec![45, 55],
        warmup_iters: 0,
        checkpoint_every: 20,
        ..TrainConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::preset("tiny_desk").expect("built-in preset");
        model.tasks = vec![TaskSpec {
            name: "synthetic".into(),
            num_keypoints: 13,
        }];
        RunConfig {
            model,
            train: desk_train_config(),
            data: DataConfig::default(),
            mim: MimConfig::default(),
            distill: DistillConfig::default(),
            group: GroupConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dotted; array elements by index) in `root`. Only existing
/// keys may be set.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let mut node = root;
    for key in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(key),
            Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown configuration key `{path}`")))?;
    }
    *node = parse_value(raw);
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(text, e))
    }

    /// Reads `path` (or starts from the defaults), then applies overrides
    /// in order and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let cfg = Self::load_unchecked(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`RunConfig::load`] without the final validation, for callers
    /// that replace parts of the configuration first.
    pub fn load_unchecked(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => Self::from_json(&std::fs::read_to_string(p).map_err(Error::io(p))?)?,
            None => RunConfig::default(),
        };
        base.overridden(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let cfg = self.overridden(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn overridden(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.tasks.len() != self.model.tasks.len() {
            return Err(Error::Config(format!(
                "{} data sources for {} model tasks",
                self.data.tasks.len(),
                self.model.tasks.len()
            )));
        }
        for (i, (d, t)) in self.data.tasks.iter().zip(&self.model.tasks).enumerate() {
            if d.num_keypoints() != t.num_keypoints {
                return Err(Error::Config(format!(
                    "task {i}: data has {} keypoints, decoder has {}",
                    d.num_keypoints(),
                    t.num_keypoints
                )));
            }
            if let TaskData::Coco { spec, .. } = d {
                spec.validate()?;
            }
        }
        Ok(())
    }

    pub fn is_bottom_up(&self) -> bool {
        self.model.decoder.kind == DecoderKind::BottomUpAe
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the compact JSON form, in hex.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        format!("{:x}", Sha256::digest(&bytes))
    }
}
