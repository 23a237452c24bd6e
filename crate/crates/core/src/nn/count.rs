//! Closed-form multiply-accumulate counts mirroring the forward pass scope
//! by scope, so large models can be measured without running them.

use alloc::format;

use super::config::{DecoderKind, ModelConfig, MoeMode};
use crate::{FlopCounter, Result};

/// Multiply-accumulates of one forward pass at `input_hw` for a batch of
/// `batch` images routed to `task`; `with_token` adds a knowledge token.
pub fn flop_counter(
    cfg: &ModelConfig,
    input_hw: (usize, usize),
    batch: usize,
    task: usize,
    with_token: bool,
) -> Result<FlopCounter> {
    cfg.validate()?;
    cfg.check_task(task)?;
    let b = &cfg.backbone;
    let (gh, gw) = b.grid(input_hw)?;
    let (n, c, hd) = (batch as u64, b.dim as u64, b.hidden_dim() as u64);
    let grid = (gh * gw) as u64;
    let mut fc = FlopCounter::new();
    let p = b.patch_size as u64;
    fc.add("patch_embed", n * c * grid * b.in_channels as u64 * p * p);
    let tokens = grid + with_token as u64;
    for i in 0..b.depth {
        let a = format!("blocks.{i}.attn");
        fc.add(&format!("{a}.qkv"), n * tokens * c * 3 * c);
        if b.attention.is_windowed() {
            let (wh, ww) = b.window;
            let nw = (gh.div_ceil(wh) * gw.div_ceil(ww)) as u64;
            let tw = (wh * ww) as u64;
            let e = if b.attention.is_pooled() { nw } else { 0 };
            fc.add(&format!("{a}.scores"), n * nw * tw * (tw + e) * c);
            fc.add(&format!("{a}.context"), n * nw * tw * (tw + e) * c);
        } else {
            fc.add(&format!("{a}.scores"), n * tokens * tokens * c);
            fc.add(&format!("{a}.context"), n * tokens * tokens * c);
        }
        fc.add(&format!("{a}.proj"), n * tokens * c * c);
        let f = format!("blocks.{i}.ffn");
        let rows = n * tokens;
        let one = rows * c * hd;
        match cfg.moe.mode {
            MoeMode::Plain | MoeMode::IFfn | MoeMode::PsFfn => {
                fc.add(&format!("{f}.fc1"), one);
                fc.add(&format!("{f}.fc2"), one);
            }
            MoeMode::IsFfn => {
                for part in ["shared", "task"] {
                    fc.add(&format!("{f}.{part}.fc1"), one);
                    fc.add(&format!("{f}.{part}.fc2"), one);
                }
            }
        }
    }
    let d = cfg.decoder.deconv_channels as u64;
    let nk = cfg.tasks[task].num_keypoints as u64;
    let pre = format!("decoder.{task}");
    match cfg.decoder.kind {
        DecoderKind::Classic | DecoderKind::ClassicFp => {
            fc.add(&format!("{pre}.deconv1"), n * c * grid * d * 16);
            fc.add(&format!("{pre}.deconv2"), n * d * 4 * grid * d * 16);
            fc.add(&format!("{pre}.final"), n * nk * 16 * grid * d);
        }
        DecoderKind::Simple => fc.add(&format!("{pre}.conv"), n * nk * 16 * grid * c * 9),
        DecoderKind::Minimal => fc.add(&format!("{pre}.proj"), n * 16 * nk * grid * c),
        DecoderKind::BottomUpAe => {
            let out = nk * (1 + cfg.decoder.tag_dim as u64);
            fc.add(&format!("{pre}.deconv1"), n * c * grid * d * 16);
            fc.add(&format!("{pre}.final"), n * out * 4 * grid * d);
        }
    }
    Ok(fc)
}

/// Splits a counter into `(backbone, decoder)` multiply-accumulates.
pub fn split_macs(fc: &FlopCounter) -> (u64, u64) {
    let dec = fc.macs_with_prefix("decoder.");
    (fc.total_macs() - dec, dec)
}
