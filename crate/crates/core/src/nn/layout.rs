//! Names, shapes and initialisers of every tensor in a model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::{DecoderKind, ModelConfig, MoeMode};
use super::params::{Init, ParamInfo, ParamKind, ParamSpec};
use crate::Result;

pub const INIT_STD: f64 = 0.02;

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, name: String, kind: ParamKind, layer: usize, task: Option<usize>, shape: &[usize], init: Init) {
        let decay = kind != ParamKind::Buffer && shape.len() >= 2 && !name.ends_with("pos_embed");
        self.specs.push(ParamSpec {
            info: ParamInfo {
                name,
                kind,
                layer,
                task,
                decay,
                fixed: false,
                frozen: false,
            },
            shape: shape.to_vec(),
            init,
        });
    }

    fn norm(&mut self, prefix: &str, kind: ParamKind, layer: usize, c: usize) {
        self.push(format!("{prefix}.gamma"), kind, layer, None, &[c], Init::Ones);
        self.push(format!("{prefix}.beta"), kind, layer, None, &[c], Init::Zeros);
    }

    #[allow(clippy::too_many_arguments)]
    fn linear(&mut self, prefix: &str, kind: ParamKind, layer: usize, task: Option<usize>, i: usize, o: usize, w: Init) {
        self.push(format!("{prefix}.w"), kind, layer, task, &[i, o], w);
        self.push(format!("{prefix}.b"), kind, layer, task, &[o], Init::Zeros);
    }

    fn ffn(&mut self, prefix: &str, layer: usize, task: Option<usize>, c: usize, hidden: usize, zero_out: bool) {
        let tn = Init::TruncNormal(INIT_STD);
        self.linear(&format!("{prefix}.fc1"), ParamKind::Ffn, layer, task, c, hidden, tn);
        let w2 = if zero_out { Init::Zeros } else { tn };
        self.linear(&format!("{prefix}.fc2"), ParamKind::Ffn, layer, task, hidden, c, w2);
    }

    fn batch_norm(&mut self, prefix: &str, layer: usize, task: usize, c: usize) {
        let t = Some(task);
        self.push(format!("{prefix}.gamma"), ParamKind::Decoder, layer, t, &[c], Init::Ones);
        self.push(format!("{prefix}.beta"), ParamKind::Decoder, layer, t, &[c], Init::Zeros);
        self.push(format!("{prefix}.running_mean"), ParamKind::Buffer, layer, t, &[c], Init::Zeros);
        self.push(format!("{prefix}.running_var"), ParamKind::Buffer, layer, t, &[c], Init::Ones);
    }
}

pub fn backbone_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    let b = &cfg.backbone;
    let c = b.dim;
    let hidden = b.hidden_dim();
    let tn = Init::TruncNormal(INIT_STD);
    let mut s = Builder { specs: Vec::new() };
    let (gh, gw) = b.pos_grid()?;
    s.push("patch_embed.w".into(), ParamKind::Embed, 0, None, &[c, b.in_channels, b.patch_size, b.patch_size], tn);
    s.push("patch_embed.b".into(), ParamKind::Embed, 0, None, &[c], Init::Zeros);
    s.push("pos_embed".into(), ParamKind::Embed, 0, None, &[gh * gw, c], tn);
    for i in 0..b.depth {
        let layer = i + 1;
        let p = format!("blocks.{i}");
        s.norm(&format!("{p}.norm1"), ParamKind::Mhsa, layer, c);
        s.linear(&format!("{p}.attn.qkv"), ParamKind::Mhsa, layer, None, c, 3 * c, tn);
        s.linear(&format!("{p}.attn.proj"), ParamKind::Mhsa, layer, None, c, c, tn);
        if b.rel_pos_bias && b.attention.is_windowed() {
            let (wh, ww) = b.window;
            let entries = (2 * wh - 1) * (2 * ww - 1);
            s.push(format!("{p}.attn.rel_pos"), ParamKind::Mhsa, layer, None, &[entries, b.heads], tn);
        }
        s.norm(&format!("{p}.norm2"), ParamKind::Ffn, layer, c);
        let f = format!("{p}.ffn");
        match cfg.moe.mode {
            MoeMode::Plain => s.ffn(&f, layer, None, c, hidden, false),
            MoeMode::PsFfn => {
                let a = cfg.moe.task_channels(c)?;
                s.linear(&format!("{f}.fc1"), ParamKind::Ffn, layer, None, c, hidden, tn);
                let slice = |start| Init::ColumnSlice {
                    key: i,
                    cols: c,
                    start,
                    std: INIT_STD,
                };
                s.linear(&format!("{f}.fc2_shared"), ParamKind::Ffn, layer, None, hidden, c - a, slice(0));
                for t in 0..cfg.num_tasks() {
                    s.linear(&format!("{f}.fc2_task.{t}"), ParamKind::Ffn, layer, Some(t), hidden, a, slice(c - a));
                }
            }
            MoeMode::IFfn => {
                for t in 0..cfg.num_tasks() {
                    s.ffn(&format!("{f}.task.{t}"), layer, Some(t), c, hidden, false);
                }
            }
            MoeMode::IsFfn => {
                s.ffn(&format!("{f}.shared"), layer, None, c, hidden, false);
                for t in 0..cfg.num_tasks() {
                    s.ffn(&format!("{f}.task.{t}"), layer, Some(t), c, hidden, true);
                }
            }
        }
    }
    s.norm("norm", ParamKind::Norm, cfg.head_layer(), c);
    Ok(s.specs)
}

pub fn decoder_specs(cfg: &ModelConfig, task: usize) -> Vec<ParamSpec> {
    let c = cfg.backbone.dim;
    let d = cfg.decoder.deconv_channels;
    let nk = cfg.tasks[task].num_keypoints;
    let layer = cfg.head_layer();
    let tn = Init::TruncNormal(INIT_STD);
    let t = Some(task);
    let p = format!("decoder.{task}");
    let mut s = Builder { specs: Vec::new() };
    let k = ParamKind::Decoder;
    match cfg.decoder.kind {
        DecoderKind::Classic | DecoderKind::ClassicFp => {
            s.push(format!("{p}.deconv1.w"), k, layer, t, &[c, d, 4, 4], tn);
            s.batch_norm(&format!("{p}.bn1"), layer, task, d);
            s.push(format!("{p}.deconv2.w"), k, layer, t, &[d, d, 4, 4], tn);
            s.batch_norm(&format!("{p}.bn2"), layer, task, d);
            s.push(format!("{p}.final.w"), k, layer, t, &[nk, d, 1, 1], tn);
            s.push(format!("{p}.final.b"), k, layer, t, &[nk], Init::Zeros);
            if cfg.decoder.kind == DecoderKind::ClassicFp {
                let n = s.specs.len();
                s.specs[n - 2..].iter_mut().for_each(|x| x.info.fixed = true);
            }
        }
        DecoderKind::Simple => {
            s.push(format!("{p}.conv.w"), k, layer, t, &[nk, c, 3, 3], tn);
            s.push(format!("{p}.conv.b"), k, layer, t, &[nk], Init::Zeros);
        }
        DecoderKind::Minimal => {
            s.push(format!("{p}.proj.w"), k, layer, t, &[16 * nk, c, 1, 1], tn);
            s.push(format!("{p}.proj.b"), k, layer, t, &[16 * nk], Init::Zeros);
        }
        DecoderKind::BottomUpAe => {
            let out = nk * (1 + cfg.decoder.tag_dim);
            s.push(format!("{p}.deconv1.w"), k, layer, t, &[c, d, 4, 4], tn);
            s.batch_norm(&format!("{p}.bn1"), layer, task, d);
            s.push(format!("{p}.final.w"), k, layer, t, &[out, d, 1, 1], tn);
            s.push(format!("{p}.final.b"), k, layer, t, &[out], Init::Zeros);
        }
    }
    s.specs
}

/// Every tensor of the model: backbone, then one decoder per task.
pub fn model_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut specs = backbone_specs(cfg)?;
    for t in 0..cfg.num_tasks() {
        specs.extend(decoder_specs(cfg, t));
    }
    Ok(specs)
}

pub fn count(specs: &[ParamSpec]) -> usize {
    specs
        .iter()
        .filter(|s| s.info.kind != ParamKind::Buffer)
        .map(ParamSpec::numel)
        .sum()
}

pub fn count_trainable(specs: &[ParamSpec]) -> usize {
    specs
        .iter()
        .filter(|s| s.info.is_trainable())
        .map(ParamSpec::numel)
        .sum()
}
