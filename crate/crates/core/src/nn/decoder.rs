use alloc::format;

use super::config::{DecoderKind, ModelConfig};
use super::params::{Mode, Session};
use crate::autodiff::{NormMode, Var};
use crate::{Error, Real, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Decoder outputs. `tags` is present for the bottom-up head only.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[N, Nk, H', W']`.
    pub heatmaps: Var,
    /// `[N, Nk * tag_dim, H', W']`.
    pub tags: Option<Var>,
}

/// Deconvolution (x2), batch norm, ReLU.
fn deconv_block<T: Real>(s: &mut Session<T>, x: Var, prefix: &str, name: &str, bn: &str) -> Result<Var> {
    s.scope(&format!("{prefix}.{name}"));
    let w = s.p(&format!("{prefix}.{name}.w"))?;
    let (h, wd) = (s.g.shape(x)[2], s.g.shape(x)[3]);
    let y = s.g.deconv2d(x, w, None, 2, 1)?;
    if s.g.shape(y)[2] != 2 * h || s.g.shape(y)[3] != 2 * wd {
        return Err(Error::invalid("deconv2d", "deconvolution does not double the feature map"));
    }
    let gamma = s.p(&format!("{prefix}.{bn}.gamma"))?;
    let beta = s.p(&format!("{prefix}.{bn}.beta"))?;
    let mean_name = format!("{prefix}.{bn}.running_mean");
    let var_name = format!("{prefix}.{bn}.running_var");
    let y = match s.mode() {
        Mode::Train => {
            let (y, m, v) = s.g.batch_norm(y, gamma, beta, NormMode::Train, None, BN_EPS)?;
            s.record_bn(&mean_name, &var_name, m, v)?;
            y
        }
        Mode::Eval => {
            let m = s.buffer(&mean_name)?.data();
            let v = s.buffer(&var_name)?.data();
            s.g.batch_norm(y, gamma, beta, NormMode::Eval, Some((m, v)), BN_EPS)?.0
        }
    };
    Ok(s.g.relu(y))
}

fn conv<T: Real>(s: &mut Session<T>, x: Var, prefix: &str, name: &str, pad: usize) -> Result<Var> {
    s.scope(&format!("{prefix}.{name}"));
    let w = s.p(&format!("{prefix}.{name}.w"))?;
    let b = s.p(&format!("{prefix}.{name}.b"))?;
    s.g.conv2d(x, w, Some(b), 1, pad)
}

/// Runs the decoder of `task` on backbone features `[N, C, h, w]`.
pub fn decode<T: Real>(s: &mut Session<T>, cfg: &ModelConfig, task: usize, features: Var) -> Result<HeadOutput> {
    cfg.check_task(task)?;
    let fs = s.g.shape(features).to_vec();
    if fs.len() != 4 || fs[1] != cfg.backbone.dim {
        return Err(Error::shape("decoder", &fs, &[cfg.backbone.dim]));
    }
    let p = format!("decoder.{task}");
    let nk = cfg.tasks[task].num_keypoints;
    let heatmaps = match cfg.decoder.kind {
        DecoderKind::Classic | DecoderKind::ClassicFp => {
            let y = deconv_block(s, features, &p, "deconv1", "bn1")?;
            let y = deconv_block(s, y, &p, "deconv2", "bn2")?;
            conv(s, y, &p, "final", 0)?
        }
        DecoderKind::Simple => {
            let y = s.g.relu(features);
            let y = s.g.upsample_bilinear(y, 4)?;
            conv(s, y, &p, "conv", 1)?
        }
        DecoderKind::Minimal => {
            let y = conv(s, features, &p, "proj", 0)?;
            s.g.pixel_shuffle(y, 4)?
        }
        DecoderKind::BottomUpAe => {
            let y = deconv_block(s, features, &p, "deconv1", "bn1")?;
            let y = conv(s, y, &p, "final", 0)?;
            let heat = s.g.narrow(y, 1, 0, nk)?;
            let tags = s.g.narrow(y, 1, nk, nk * cfg.decoder.tag_dim)?;
            return Ok(HeadOutput {
                heatmaps: heat,
                tags: Some(tags),
            });
        }
    };
    Ok(HeadOutput { heatmaps, tags: None })
}
