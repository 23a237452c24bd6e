use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Full,
    Window,
    WindowShift,
    WindowPool,
    WindowShiftPool,
}

impl AttentionMode {
    pub fn is_windowed(self) -> bool {
        self != AttentionMode::Full
    }

    pub fn is_shifted(self) -> bool {
        matches!(self, AttentionMode::WindowShift | AttentionMode::WindowShiftPool)
    }

    pub fn is_pooled(self) -> bool {
        matches!(self, AttentionMode::WindowPool | AttentionMode::WindowShiftPool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Patch-embedding stride; equal to `patch_size` or half of it.
    pub stride: usize,
    pub mlp_ratio: f64,
    pub attention: AttentionMode,
    pub window: (usize, usize),
    pub drop_path_rate: f64,
    pub input_hw: (usize, usize),
    /// Grid the position embedding is initialised for; `None` uses the grid
    /// of `input_hw`. Other grids get a bilinear resize.
    #[serde(default)]
    pub pos_grid: Option<(usize, usize)>,
    pub activation: Activation,
    /// Learnable per-head relative position bias inside windows.
    #[serde(default)]
    pub rel_pos_bias: bool,
    pub in_channels: usize,
}

impl BackboneConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (depth, dim, heads, patch) = match name {
            "vit_s" => (12, 384, 6, 16),
            "vit_b" => (12, 768, 12, 16),
            "vit_l" => (24, 1024, 16, 16),
            "vit_h" => (32, 1280, 16, 16),
            "tiny_desk" => (2, 32, 2, 4),
            other => return Err(Error::UnknownModel(other.to_string())),
        };
        let input_hw = if name == "tiny_desk" { (32, 24) } else { (256, 192) };
        Ok(BackboneConfig {
            depth,
            dim,
            heads,
            patch_size: patch,
            stride: patch,
            mlp_ratio: 4.0,
            attention: AttentionMode::Full,
            window: (8, 8),
            drop_path_rate: 0.0,
            input_hw,
            pos_grid: None,
            activation: Activation::Gelu,
            rel_pos_bias: false,
            in_channels: 3,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        libm::round(self.mlp_ratio * self.dim as f64) as usize
    }

    /// Zero padding applied by the patch projection.
    pub fn patch_pad(&self) -> usize {
        (self.patch_size - self.stride) / 2
    }

    pub fn grid(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        if h % self.stride != 0 || w % self.stride != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the patch stride {}",
                self.stride
            )));
        }
        Ok((h / self.stride, w / self.stride))
    }

    pub fn pos_grid(&self) -> Result<(usize, usize)> {
        match self.pos_grid {
            Some(g) => Ok(g),
            None => self.grid(self.input_hw),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.in_channels == 0 {
            return bad("depth, dim, heads and in_channels must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.patch_size == 0 || !(self.stride == self.patch_size || 2 * self.stride == self.patch_size) {
            return bad(format!(
                "stride {} must equal the patch size {} or half of it",
                self.stride, self.patch_size
            ));
        }
        let hidden = self.mlp_ratio * self.dim as f64;
        if hidden <= 0.0 || (hidden - libm::round(hidden)).abs() > 1e-9 {
            return bad(format!("mlp_ratio * dim = {hidden} is not a positive integer"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate));
        }
        let grid = self.grid(self.input_hw)?;
        if self.attention.is_windowed() {
            let (wh, ww) = self.window;
            if wh == 0 || ww == 0 || wh > grid.0 || ww > grid.1 {
                return bad(format!("window {wh}x{ww} does not fit the {}x{} grid", grid.0, grid.1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeMode {
    Plain,
    IFfn,
    IsFfn,
    PsFfn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub mode: MoeMode,
    pub num_tasks: usize,
    pub partition_ratio: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            mode: MoeMode::Plain,
            num_tasks: 1,
            partition_ratio: 0.25,
        }
    }
}

impl MoeConfig {
    /// Output channels of the task-specific second layer, `alpha * C`.
    pub fn task_channels(&self, dim: usize) -> Result<usize> {
        let a = self.partition_ratio;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!("partition_ratio {a} outside (0, 1)")));
        }
        let t = a * dim as f64;
        if (t - libm::round(t)).abs() > 1e-9 || libm::round(t) < 1.0 || libm::round(t) as usize >= dim {
            return Err(Error::Config(format!("partition_ratio {a} * dim {dim} = {t} is not integral")));
        }
        Ok(libm::round(t) as usize)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::Config("num_tasks must be at least 1".into()));
        }
        if self.mode == MoeMode::PsFfn {
            self.task_channels(dim)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Classic,
    ClassicFp,
    Simple,
    Minimal,
    BottomUpAe,
}

impl DecoderKind {
    pub const TOP_DOWN: [DecoderKind; 4] = [
        DecoderKind::Classic,
        DecoderKind::ClassicFp,
        DecoderKind::Simple,
        DecoderKind::Minimal,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    /// Channels of the deconvolution blocks.
    pub deconv_channels: usize,
    pub tag_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            kind: DecoderKind::Classic,
            deconv_channels: 256,
            tag_dim: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub num_keypoints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub moe: MoeConfig,
    pub tasks: Vec<TaskSpec>,
}

impl ModelConfig {
    /// Backbone preset with a classic decoder for 17 keypoints.
    pub fn preset(name: &str) -> Result<Self> {
        let backbone = BackboneConfig::preset(name)?;
        let decoder = DecoderConfig {
            deconv_channels: if name == "tiny_desk" { 32 } else { 256 },
            ..DecoderConfig::default()
        };
        Ok(ModelConfig {
            backbone,
            decoder,
            moe: MoeConfig::default(),
            tasks: vec![TaskSpec {
                name: "coco".to_string(),
                num_keypoints: 17,
            }],
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.moe.validate(self.backbone.dim)?;
        if self.tasks.is_empty() || self.tasks.len() != self.moe.num_tasks {
            return Err(Error::Config(format!(
                "{} task specs for moe.num_tasks = {}",
                self.tasks.len(),
                self.moe.num_tasks
            )));
        }
        if self.tasks.iter().any(|t| t.num_keypoints == 0) {
            return Err(Error::Config("every task needs at least one keypoint".into()));
        }
        let d = &self.decoder;
        if d.deconv_channels == 0 || d.tag_dim == 0 {
            return Err(Error::Config("deconv_channels and tag_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.tasks.len() {
            return Err(Error::TaskIndex {
                index: task,
                num_tasks: self.tasks.len(),
            });
        }
        Ok(())
    }

    /// Layer index of the head parameters (final norm and decoders).
    pub fn head_layer(&self) -> usize {
        self.backbone.depth + 1
    }

    /// Heatmap size for an input of the given size.
    pub fn heatmap_hw(&self, input_hw: (usize, usize)) -> Result<(usize, usize)> {
        let (h, w) = self.backbone.grid(input_hw)?;
        let f = match self.decoder.kind {
            DecoderKind::BottomUpAe => 2,
            _ => 4,
        };
        Ok((h * f, w * f))
    }
}
