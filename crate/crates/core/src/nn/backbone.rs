use alloc::format;
use alloc::vec::Vec;

use super::config::{Activation, BackboneConfig, ModelConfig, MoeMode};
use super::params::{Mode, Session};
use crate::autodiff::{KeyMask, Var, WindowLayout, GATHER_ZERO};
use crate::{Error, Real, Result, Tensor};

/// Patches to replace by a learned mask token before the position
/// embedding is added.
pub struct TokenMask<'a> {
    /// One flag per token of `[N, h*w]`.
    pub masked: &'a [bool],
    /// `[1, C]`.
    pub token: Var,
}

/// Patch projection plus position embedding: `[N, Cin, H, W] -> [N, h*w, C]`.
pub fn patch_embed<T: Real>(
    s: &mut Session<T>,
    cfg: &BackboneConfig,
    images: Var,
    mask: Option<TokenMask>,
) -> Result<(Var, (usize, usize))> {
    let xs = s.g.shape(images).to_vec();
    if xs.len() != 4 || xs[1] != cfg.in_channels {
        return Err(Error::shape("patch_embed", &xs, &[cfg.in_channels]));
    }
    let (n, (gh, gw)) = (xs[0], cfg.grid((xs[2], xs[3]))?);
    let c = cfg.dim;
    s.scope("patch_embed");
    let w = s.p("patch_embed.w")?;
    let b = s.p("patch_embed.b")?;
    let f = s.g.conv2d(images, w, Some(b), cfg.stride, cfg.patch_pad())?;
    let f = s.g.reshape(f, &[n, c, gh * gw])?;
    let mut tokens = s.g.permute(f, &[0, 2, 1])?;
    if let Some(m) = mask {
        if m.masked.len() != n * gh * gw {
            return Err(Error::shape("patch_embed", &[m.masked.len()], &[n * gh * gw]));
        }
        s.scope("mim.mask");
        let one = |b: bool| if b { T::one() } else { T::zero() };
        let keep = Tensor::from_fn(&[n, gh * gw, c], |i| one(!m.masked[i / c]));
        let hit = Tensor::new(&[n, gh * gw, 1], m.masked.iter().map(|&b| one(b)).collect())?;
        let keep = s.g.constant(keep);
        let hit = s.g.constant(hit);
        let kept = s.g.mul(tokens, keep)?;
        let filled = s.g.matmul(hit, m.token)?;
        tokens = s.g.add(kept, filled)?;
    }
    let pos = s.p("pos_embed")?;
    let (ph, pw) = cfg.pos_grid()?;
    let pos = if (ph, pw) == (gh, gw) {
        pos
    } else {
        let p = s.g.reshape(pos, &[1, ph, pw, c])?;
        let p = s.g.permute(p, &[0, 3, 1, 2])?;
        let p = s.g.resize_bilinear(p, (gh, gw))?;
        let p = s.g.permute(p, &[0, 2, 3, 1])?;
        s.g.reshape(p, &[gh * gw, c])?
    };
    let tokens = s.g.add_broadcast(tokens, pos)?;
    Ok((tokens, (gh, gw)))
}

/// Splits the last axis of `x [B, T, parts*C]` into `parts` head-major
/// tensors of shape `[B*heads, T, C/heads]`.
fn split_heads<T: Real>(s: &mut Session<T>, x: Var, parts: usize, heads: usize) -> Result<Vec<Var>> {
    let xs = s.g.shape(x).to_vec();
    let (b, t) = (xs[0], xs[1]);
    let dh = xs[2] / parts / heads;
    let y = s.g.reshape(x, &[b, t, parts, heads, dh])?;
    let y = s.g.permute(y, &[2, 0, 3, 1, 4])?;
    let y = s.g.reshape(y, &[parts, b * heads * t * dh])?;
    (0..parts)
        .map(|i| {
            let part = s.g.narrow(y, 0, i, 1)?;
            s.g.reshape(part, &[b * heads, t, dh])
        })
        .collect()
}

/// Scaled dot-product multi-head attention over `x [B, T, C]`.
///
/// `extra [B, E, C]` tokens are projected with the key/value weights and
/// appended to the keys and values only. `bias [heads, T, T+E]` is added to
/// the logits.
pub fn mhsa<T: Real>(
    s: &mut Session<T>,
    prefix: &str,
    heads: usize,
    x: Var,
    extra: Option<Var>,
    mask: Option<&KeyMask>,
    bias: Option<Var>,
) -> Result<Var> {
    let xs = s.g.shape(x).to_vec();
    if xs.len() != 3 || heads == 0 || !xs[2].is_multiple_of(heads) {
        return Err(Error::shape("mhsa", &xs, &[heads]));
    }
    s.scope(&format!("{prefix}.qkv"));
    let qkv = project_qkv(s, prefix, x)?;
    let extra_kv = match extra {
        Some(e) => {
            s.scope(&format!("{prefix}.pool_kv"));
            let qkv_e = project_qkv(s, prefix, e)?;
            let c = xs[2];
            Some(s.g.narrow(qkv_e, 2, c, 2 * c)?)
        }
        None => None,
    };
    let ctx = attend(s, prefix, heads, qkv, extra_kv, mask, bias)?;
    project_out(s, prefix, ctx)
}

fn project_qkv<T: Real>(s: &mut Session<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = s.p(&format!("{prefix}.qkv.w"))?;
    let b = s.p(&format!("{prefix}.qkv.b"))?;
    s.g.linear(x, w, Some(b))
}

fn project_out<T: Real>(s: &mut Session<T>, prefix: &str, x: Var) -> Result<Var> {
    s.scope(&format!("{prefix}.proj"));
    let w = s.p(&format!("{prefix}.proj.w"))?;
    let b = s.p(&format!("{prefix}.proj.b"))?;
    s.g.linear(x, w, Some(b))
}

/// Attention weights and context for projected `qkv [B, T, 3C]`;
/// `extra_kv [B, E, 2C]` holds keys and values visible to every query.
/// Returns `[B, T, C]` before the output projection.
fn attend<T: Real>(
    s: &mut Session<T>,
    prefix: &str,
    heads: usize,
    qkv: Var,
    extra_kv: Option<Var>,
    mask: Option<&KeyMask>,
    bias: Option<Var>,
) -> Result<Var> {
    let xs = s.g.shape(qkv).to_vec();
    let (b, t, c) = (xs[0], xs[1], xs[2] / 3);
    let dh = c / heads;
    let parts = split_heads(s, qkv, 3, heads)?;
    let (q, mut k, mut v) = (parts[0], parts[1], parts[2]);
    let mut keys = t;
    if let Some(kv) = extra_kv {
        let es = s.g.shape(kv);
        if es.len() != 3 || es[0] != b || es[2] != 2 * c {
            return Err(Error::shape("mhsa", es, &[b, 0, 2 * c]));
        }
        keys += es[1];
        let parts = split_heads(s, kv, 2, heads)?;
        k = s.g.concat(&[k, parts[0]], 1)?;
        v = s.g.concat(&[v, parts[1]], 1)?;
    }
    s.scope(&format!("{prefix}.scores"));
    let q = s.g.scale(q, T::of_f64(1.0 / libm::sqrt(dh as f64)));
    let mut logits = s.g.bmm(q, k, true)?;
    if let Some(bias) = bias {
        let l = s.g.reshape(logits, &[b, heads, t, keys])?;
        let l = s.g.add_broadcast(l, bias)?;
        logits = s.g.reshape(l, &[b * heads, t, keys])?;
    }
    let attn = s.g.softmax(logits, mask)?;
    s.scope(&format!("{prefix}.context"));
    let ctx = s.g.bmm(attn, v, false)?;
    let ctx = s.g.reshape(ctx, &[b, heads, t, dh])?;
    let ctx = s.g.permute(ctx, &[0, 2, 1, 3])?;
    s.g.reshape(ctx, &[b, t, c])
}

/// Gather map from the relative-position table `[(2wh-1)(2ww-1), heads]` to
/// a logit bias `[heads, wh*ww, wh*ww + extra]`; extra keys get no bias.
fn rel_pos_index((wh, ww): (usize, usize), heads: usize, extra: usize) -> Vec<u32> {
    let t = wh * ww;
    let mut index = Vec::with_capacity(heads * t * (t + extra));
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t + extra {
                if j >= t {
                    index.push(GATHER_ZERO);
                    continue;
                }
                let dy = (i / ww) as isize - (j / ww) as isize + wh as isize - 1;
                let dx = (i % ww) as isize - (j % ww) as isize + ww as isize - 1;
                let entry = dy as usize * (2 * ww - 1) + dx as usize;
                index.push((entry * heads + h) as u32);
            }
        }
    }
    index
}

/// Attention confined to windows of the token grid `x [N, h*w, C]`.
///
/// Projections run on the real tokens only; windows are cut from the
/// projected queries, keys and values, and padding keys are masked.
pub fn window_attention<T: Real>(
    s: &mut Session<T>,
    prefix: &str,
    cfg: &BackboneConfig,
    x: Var,
    grid: (usize, usize),
    shift: bool,
) -> Result<Var> {
    let xs = s.g.shape(x).to_vec();
    let (wh, ww) = cfg.window;
    if wh > grid.0 || ww > grid.1 {
        return Err(Error::invalid("window_attention", "window larger than the feature grid"));
    }
    if xs.len() != 3 || !xs[2].is_multiple_of(cfg.heads) {
        return Err(Error::shape("window_attention", &xs, &[cfg.heads]));
    }
    let (n, c) = (xs[0], xs[2]);
    let layout = WindowLayout::new(n, grid, cfg.window, shift)?;
    s.scope(&format!("{prefix}.qkv"));
    let qkv = project_qkv(s, prefix, x)?;
    let qkv = s.g.window_partition(qkv, &layout)?;
    let nw = layout.windows_per_image();
    let tw = layout.window_tokens();
    let extra = if cfg.attention.is_pooled() {
        // per window, the mean of its valid keys and values; every window of
        // an image sees the pooled entries of all its windows
        let kv = s.g.narrow(qkv, 2, c, 2 * c)?;
        let flat = s.g.reshape(kv, &[n * nw * tw, 2 * c])?;
        let pooled = s.g.segment_mean(flat, layout.window_segments())?;
        let index: Vec<u32> = (0..n * nw)
            .flat_map(|win| {
                let first = win / nw * nw;
                (first..first + nw).flat_map(move |p| (p * 2 * c..(p + 1) * 2 * c).map(|i| i as u32))
            })
            .collect();
        Some(s.g.gather(pooled, index, &[n * nw, nw, 2 * c])?)
    } else {
        None
    };
    let e = if extra.is_some() { nw } else { 0 };
    let mask = layout.has_padding().then(|| layout.key_mask(cfg.heads, tw, e));
    let bias = if cfg.rel_pos_bias {
        let table = s.p(&format!("{prefix}.rel_pos"))?;
        let index = rel_pos_index(cfg.window, cfg.heads, e);
        Some(s.g.gather(table, index, &[cfg.heads, tw, tw + e])?)
    } else {
        None
    };
    let ctx = attend(s, prefix, cfg.heads, qkv, extra, mask.as_ref(), bias)?;
    let ctx = s.g.window_merge(ctx, &layout)?;
    project_out(s, prefix, ctx)
}

fn activate<T: Real>(s: &mut Session<T>, act: Activation, x: Var) -> Var {
    match act {
        Activation::Gelu => s.g.gelu(x),
        Activation::Relu => s.g.relu(x),
    }
}

fn linear_named<T: Real>(s: &mut Session<T>, x: Var, prefix: &str, scope: &str) -> Result<Var> {
    s.scope(scope);
    let w = s.p(&format!("{prefix}.w"))?;
    let b = s.p(&format!("{prefix}.b"))?;
    s.g.linear(x, w, Some(b))
}

fn plain_ffn<T: Real>(s: &mut Session<T>, act: Activation, x: Var, prefix: &str, scope: &str) -> Result<Var> {
    let h = linear_named(s, x, &format!("{prefix}.fc1"), &format!("{scope}.fc1"))?;
    let h = activate(s, act, h);
    linear_named(s, h, &format!("{prefix}.fc2"), &format!("{scope}.fc2"))
}

/// Feed-forward sublayer of block `i`, routed to `task`.
pub fn ffn<T: Real>(s: &mut Session<T>, cfg: &ModelConfig, i: usize, x: Var, task: usize) -> Result<Var> {
    cfg.check_task(task)?;
    let act = cfg.backbone.activation;
    let p = format!("blocks.{i}.ffn");
    match cfg.moe.mode {
        MoeMode::Plain => plain_ffn(s, act, x, &p, &p),
        MoeMode::IFfn => plain_ffn(s, act, x, &format!("{p}.task.{task}"), &p),
        MoeMode::IsFfn => {
            let shared = plain_ffn(s, act, x, &format!("{p}.shared"), &format!("{p}.shared"))?;
            let own = plain_ffn(s, act, x, &format!("{p}.task.{task}"), &format!("{p}.task"))?;
            s.g.add(shared, own)
        }
        MoeMode::PsFfn => {
            let h = linear_named(s, x, &format!("{p}.fc1"), &format!("{p}.fc1"))?;
            let h = activate(s, act, h);
            let scope = format!("{p}.fc2");
            let shared = linear_named(s, h, &format!("{p}.fc2_shared"), &scope)?;
            let own = linear_named(s, h, &format!("{p}.fc2_task.{task}"), &scope)?;
            let axis = s.g.shape(x).len() - 1;
            s.g.concat(&[shared, own], axis)
        }
    }
}

/// Stochastic depth on a residual branch `[N, ...]`: whole samples are
/// dropped and survivors rescaled by `1 / (1 - rate)`.
pub fn drop_path<T: Real>(s: &mut Session<T>, x: Var, rate: f64) -> Result<Var> {
    if s.mode() == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let n = s.g.shape(x)[0];
    let rng = s
        .rng()
        .ok_or_else(|| Error::invalid("drop_path", "training with drop path needs an rng"))?;
    let keep = 1.0 - rate;
    let factors = (0..n)
        .map(|_| if rng.bernoulli(keep) { T::of_f64(1.0 / keep) } else { T::zero() })
        .collect();
    s.g.scale_rows(x, factors)
}

fn layer_norm<T: Real>(s: &mut Session<T>, x: Var, prefix: &str) -> Result<Var> {
    let g = s.p(&format!("{prefix}.gamma"))?;
    let b = s.p(&format!("{prefix}.beta"))?;
    s.g.layer_norm(x, g, b, 1e-6)
}

/// Pre-norm transformer block `i` on `x [N, T, C]`. The first `grid.0 *
/// grid.1` tokens form the spatial grid; in full attention any further
/// tokens (a knowledge token) join the attention.
pub fn block<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    i: usize,
    x: Var,
    grid: (usize, usize),
    task: usize,
) -> Result<Var> {
    let b = &cfg.backbone;
    let p = format!("blocks.{i}");
    let h = layer_norm(s, x, &format!("{p}.norm1"))?;
    let attn_prefix = format!("{p}.attn");
    let a = if b.attention.is_windowed() {
        if s.g.shape(x)[1] != grid.0 * grid.1 {
            return Err(Error::invalid("block", "extra tokens need full attention"));
        }
        let shift = b.attention.is_shifted() && i % 2 == 1;
        window_attention(s, &attn_prefix, b, h, grid, shift)?
    } else {
        mhsa(s, &attn_prefix, b.heads, h, None, None, None)?
    };
    // the rate grows linearly from 0 at the first block to the configured
    // value at the last
    let rate = if b.depth > 1 { b.drop_path_rate * i as f64 / (b.depth - 1) as f64 } else { b.drop_path_rate };
    let a = drop_path(s, a, rate)?;
    let x = s.g.add(x, a)?;
    let h = layer_norm(s, x, &format!("{p}.norm2"))?;
    let f = ffn(s, cfg, i, h, task)?;
    let f = drop_path(s, f, rate)?;
    s.g.add(x, f)
}

/// Blocks and final norm over embedded tokens `[N, T, C]`.
pub fn encode_tokens<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    mut x: Var,
    grid: (usize, usize),
    task: usize,
) -> Result<Var> {
    for i in 0..cfg.backbone.depth {
        x = block(s, cfg, i, x, grid, task)?;
    }
    layer_norm(s, x, "norm")
}

/// Backbone features `[N, C, h, w]` for `images [N, Cin, H, W]`.
///
/// `token [C]` is appended to the visual tokens after the patch embedding,
/// takes part in every attention layer and is dropped before the spatial
/// reshape.
pub fn backbone<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    images: Var,
    task: usize,
    token: Option<Var>,
) -> Result<(Var, (usize, usize))> {
    run_backbone(s, cfg, images, task, token, None)
}

/// Backbone features with the flagged patches replaced by a mask token
/// before the position embedding.
pub fn masked_backbone<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    images: Var,
    mask: TokenMask,
) -> Result<(Var, (usize, usize))> {
    run_backbone(s, cfg, images, 0, None, Some(mask))
}

fn run_backbone<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    images: Var,
    task: usize,
    token: Option<Var>,
    mask: Option<TokenMask>,
) -> Result<(Var, (usize, usize))> {
    cfg.check_task(task)?;
    let (mut x, grid) = patch_embed(s, &cfg.backbone, images, mask)?;
    let (n, t, c) = (s.g.shape(x)[0], grid.0 * grid.1, cfg.backbone.dim);
    if let Some(tok) = token {
        if s.g.value(tok).numel() != c {
            return Err(Error::shape("knowledge_token", s.g.shape(tok), &[c]));
        }
        let tok = s.g.reshape(tok, &[1, c])?;
        let tok = s.g.repeat_leading(tok, n)?;
        x = s.g.concat(&[x, tok], 1)?;
    }
    let mut x = encode_tokens(s, cfg, x, grid, task)?;
    if token.is_some() {
        x = s.g.narrow(x, 1, 0, t)?;
    }
    let x = s.g.permute(x, &[0, 2, 1])?;
    let x = s.g.reshape(x, &[n, c, grid.0, grid.1])?;
    Ok((x, grid))
}

