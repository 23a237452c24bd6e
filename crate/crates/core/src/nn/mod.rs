//! Pose model: plain ViT backbone, mixture-of-experts feed-forward
//! variants and heatmap decoders.

mod backbone;
mod config;
mod count;
mod decoder;
mod layout;
mod params;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use backbone::{backbone, block, masked_backbone, drop_path, encode_tokens, ffn, mhsa, patch_embed, window_attention, TokenMask};
pub use config::{
    Activation, AttentionMode, BackboneConfig, DecoderConfig, DecoderKind, ModelConfig, MoeConfig, MoeMode, TaskSpec,
};
pub use count::{flop_counter, split_macs};
pub use decoder::{decode, HeadOutput, BN_EPS, BN_MOMENTUM};
pub use layout::{backbone_specs, decoder_specs, model_specs, INIT_STD};
pub use params::{BnUpdate, Init, Mode, ParamInfo, ParamKind, ParamSpec, ParamStore, Session, StepResult};

use crate::autodiff::Var;
use crate::{Error, Real, Result, Rng, Tensor};

/// Parameter groups excluded from training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeMask {
    pub freeze_mhsa: bool,
    pub freeze_ffn: bool,
    pub freeze_patch_embed: bool,
}

impl FreezeMask {
    pub fn covers(&self, info: &ParamInfo) -> bool {
        match info.kind {
            ParamKind::Mhsa => self.freeze_mhsa,
            ParamKind::Ffn => self.freeze_ffn,
            ParamKind::Embed => self.freeze_patch_embed,
            _ => false,
        }
    }
}

/// Parameter and multiply-accumulate totals of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: usize,
    pub params_backbone: usize,
    pub params_decoder: usize,
    pub trainable: usize,
    pub backbone_macs: u64,
    pub decoder_macs: u64,
}

impl ModelStats {
    pub fn backbone_gflops(&self) -> f64 {
        self.backbone_macs as f64 / 1e9
    }

    pub fn total_gflops(&self) -> f64 {
        (self.backbone_macs + self.decoder_macs) as f64 / 1e9
    }
}

/// Analytic statistics; nothing is allocated or executed.
pub fn model_stats(cfg: &ModelConfig, input_hw: (usize, usize)) -> Result<ModelStats> {
    let specs = model_specs(cfg)?;
    let backbone = layout::count(&backbone_specs(cfg)?);
    let params = layout::count(&specs);
    let (backbone_macs, decoder_macs) = split_macs(&flop_counter(cfg, input_hw, 1, 0, false)?);
    Ok(ModelStats {
        params,
        params_backbone: backbone,
        params_decoder: params - backbone,
        trainable: layout::count_trainable(&specs),
        backbone_macs,
        decoder_macs,
    })
}

/// Parameter totals of a mixture-of-experts configuration while training
/// (every expert and decoder) and at inference for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeParamCount {
    pub mode: MoeMode,
    pub training_backbone: usize,
    pub inference_backbone: usize,
    pub training_total: usize,
    pub inference_total: usize,
}

pub fn moe_param_count(cfg: &ModelConfig) -> Result<MoeParamCount> {
    let specs = model_specs(cfg)?;
    let backbone = backbone_specs(cfg)?;
    let serving = |s: &&ParamSpec| s.info.task.is_none_or(|t| t == 0);
    let infer: Vec<ParamSpec> = backbone.iter().filter(serving).cloned().collect();
    let infer_all: Vec<ParamSpec> = specs.iter().filter(serving).cloned().collect();
    Ok(MoeParamCount {
        mode: cfg.moe.mode,
        training_backbone: layout::count(&backbone),
        inference_backbone: layout::count(&infer),
        training_total: layout::count(&specs),
        inference_total: layout::count(&infer_all),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseModel<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
}

/// Evaluated decoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub heatmaps: Tensor<T>,
    pub tags: Option<Tensor<T>>,
}

impl<T: Real> PoseModel<T> {
    /// Builds and randomly initialises a model.
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let specs = model_specs(&cfg)?;
        let params = ParamStore::from_specs(&specs, rng)?;
        Ok(PoseModel { cfg, params })
    }

    /// Assembles a model from named tensors, which must match the layout of
    /// `cfg` exactly.
    pub fn from_tensors(cfg: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let specs = model_specs(&cfg)?;
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors for this configuration, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut by_name: BTreeMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut params = ParamStore::new();
        for spec in specs {
            let t = by_name
                .remove(&spec.info.name)
                .ok_or_else(|| Error::MissingParam(spec.info.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape("load", t.shape(), &spec.shape));
            }
            params.insert(spec.info, t)?;
        }
        Ok(PoseModel { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> PoseModel<U> {
        PoseModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    pub fn session(&self, mode: Mode) -> Session<'_, T> {
        Session::new(&self.params, mode)
    }

    pub fn forward(&self, s: &mut Session<T>, images: Var, task: usize) -> Result<HeadOutput> {
        self.forward_with_token(s, images, task, None)
    }

    /// Forward pass with an optional knowledge token `[C]` appended after
    /// the patch embedding.
    pub fn forward_with_token(
        &self,
        s: &mut Session<T>,
        images: Var,
        task: usize,
        token: Option<Var>,
    ) -> Result<HeadOutput> {
        debug_assert!(core::ptr::eq(s.store(), &self.params));
        let (features, _) = backbone(s, &self.cfg, images, task, token)?;
        decode(s, &self.cfg, task, features)
    }

    /// Eval-mode outputs for `images [N, Cin, H, W]`.
    pub fn predict(&self, images: &Tensor<T>, task: usize) -> Result<Prediction<T>> {
        let mut s = self.session(Mode::Eval).frozen();
        let x = s.g.constant(images.clone());
        let out = self.forward(&mut s, x, task)?;
        Ok(Prediction {
            heatmaps: s.g.value(out.heatmaps).clone(),
            tags: out.tags.map(|t| s.g.value(t).clone()),
        })
    }

    /// Stochastic-depth rate used by training sessions.
    pub fn set_drop_path(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("drop path rate {rate} outside [0, 1)")));
        }
        self.cfg.backbone.drop_path_rate = rate;
        Ok(())
    }

    pub fn apply_freeze(&mut self, mask: &FreezeMask) {
        self.params.set_frozen(|i| mask.covers(i));
    }

    pub fn stats(&self, input_hw: (usize, usize)) -> Result<ModelStats> {
        let mut s = model_stats(&self.cfg, input_hw)?;
        s.trainable = self.params.num_trainable();
        Ok(s)
    }

    /// Collapses a partially shared model into a plain single-task model for
    /// `task`: the shared and task-specific second-layer blocks of every FFN
    /// are stacked into one layer, and only that task's decoder is kept.
    pub fn merge_for_inference(&self, task: usize) -> Result<Self> {
        if self.cfg.moe.mode != MoeMode::PsFfn {
            return Err(Error::invalid("merge_for_inference", "model does not use a partially shared FFN"));
        }
        self.cfg.check_task(task)?;
        let mut cfg = self.cfg.clone();
        cfg.moe = MoeConfig {
            mode: MoeMode::Plain,
            num_tasks: 1,
            ..self.cfg.moe.clone()
        };
        cfg.tasks = alloc::vec![self.cfg.tasks[task].clone()];
        let mut tensors = Vec::new();
        for spec in model_specs(&cfg)? {
            let name = spec.info.name.clone();
            let t = if let Some(block) = name.strip_suffix(".ffn.fc2.w").or(name.strip_suffix(".ffn.fc2.b")) {
                let leaf = if name.ends_with(".w") { "w" } else { "b" };
                let shared = self.params.get(&format!("{block}.ffn.fc2_shared.{leaf}"))?;
                let own = self.params.get(&format!("{block}.ffn.fc2_task.{task}.{leaf}"))?;
                concat_last(shared, own)?
            } else if let Some(rest) = name.strip_prefix("decoder.0.") {
                self.params.get(&format!("decoder.{task}.{rest}"))?.clone()
            } else {
                self.params.get(&name)?.clone()
            };
            tensors.push((name, t));
        }
        PoseModel::from_tensors(cfg, tensors)
    }
}

/// Concatenates two tensors with equal leading dims along the last axis.
fn concat_last<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::shape("concat", sa, sb));
    }
    let (la, lb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
    let rows = a.numel() / la.max(1);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * la..(r + 1) * la]);
        data.extend_from_slice(&b.data()[r * lb..(r + 1) * lb]);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = la + lb;
    Tensor::new(&shape, data)
}

/// Finite-difference harness over a model: input 0 is the image batch, the
/// remaining inputs replace the store entries listed in `params`.
pub struct ModelFunction<'a, F> {
    pub model: &'a PoseModel<f64>,
    pub params: Vec<usize>,
    pub mode: Mode,
    pub loss: F,
}

impl<F> ModelFunction<'_, F>
where
    F: Fn(&PoseModel<f64>, &mut Session<f64>, Var) -> Result<Var>,
{
    /// Current values of the probed inputs, images first.
    pub fn inputs(&self, images: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut v = alloc::vec![images.clone()];
        v.extend(self.params.iter().map(|&i| self.model.params().value(i).clone()));
        v
    }

    fn run(&self, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut m = self.model.clone();
        for (k, &i) in self.params.iter().enumerate() {
            *m.params_mut().value_mut(i) = inputs[k + 1].clone();
        }
        let mut s = m.session(self.mode).with_rng(Rng::new(0));
        let x = s.g.param(inputs[0].clone());
        let loss = (self.loss)(&m, &mut s, x)?;
        let (mut r, extra) = s.backward_with(loss, &[x])?;
        let mut grads = Vec::with_capacity(inputs.len());
        let zeros = |t: &Tensor<f64>| Tensor::zeros(t.shape());
        grads.push(extra.into_iter().next().flatten().unwrap_or_else(|| zeros(&inputs[0])));
        for (k, &i) in self.params.iter().enumerate() {
            grads.push(r.grads[i].take().unwrap_or_else(|| zeros(&inputs[k + 1])));
        }
        Ok((r.loss, grads))
    }
}

impl<F> crate::gradcheck::ScalarFunction for ModelFunction<'_, F>
where
    F: Fn(&PoseModel<f64>, &mut Session<f64>, Var) -> Result<Var>,
{
    fn value(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        Ok(self.run(inputs)?.0)
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        Ok(self.run(inputs)?.1)
    }
}
