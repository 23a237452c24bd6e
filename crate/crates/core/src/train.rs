//! Training configuration, batches, the optimisation loop and the
//! masked-image pretext task.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::{encode_scene, encode_targets, rescale_keypoints, Keypoint, DEFAULT_SIGMA};
use crate::data::{MultiTaskSampler, Sample, SynthImage};
use crate::losses::{ae_loss, heatmap_mse, output_distill, PersonJoints};
use crate::nn::{masked_backbone, FreezeMask, Mode, ParamInfo, ParamKind, PoseModel, Session, TokenMask, BN_MOMENTUM};
use crate::optim::{layerwise_lr, AdamState, AdamW, LrSchedule};
use crate::{Error, Real, Result, Rng, Tensor};

/// Batch size the preset learning rates were tuned for.
pub const REFERENCE_BATCH: usize = 512;

/// Which distillation terms join the ground-truth heatmap loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    #[default]
    None,
    /// MSE against the teacher heatmaps.
    Output,
    /// Student runs with a fixed knowledge token appended.
    Token,
    /// Both of the above.
    TokenOutput,
}

impl DistillMode {
    pub fn uses_teacher_output(self) -> bool {
        matches!(self, DistillMode::Output | DistillMode::TokenOutput)
    }

    pub fn uses_token(self) -> bool {
        matches!(self, DistillMode::Token | DistillMode::TokenOutput)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub layer_wise_decay: f64,
    pub drop_path: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub warmup_iters: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub freeze: FreezeMask,
    /// Gaussian width of heatmap targets, in heatmap cells.
    pub sigma: f64,
    /// Weight of the associative-embedding term for bottom-up models.
    pub ae_weight: f64,
    pub distill: DistillMode,
    /// Checkpoint period in epochs; the final epoch is always saved.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            weight_decay: 0.1,
            layer_wise_decay: 0.75,
            drop_path: 0.3,
            batch_size: REFERENCE_BATCH,
            epochs: 210,
            lr_drop_epochs: vec![170, 200],
            lr_drop_factor: 0.1,
            warmup_iters: 500,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            freeze: FreezeMask::default(),
            sigma: DEFAULT_SIGMA,
            ae_weight: 1.0,
            distill: DistillMode::None,
            checkpoint_every: 10,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Published settings per backbone. The multi-task variant doubles the
    /// batch and the learning rate.
    pub fn preset(model: &str, multi_task: bool) -> Result<Self> {
        let (decay, drop) = match model {
            "vit_s" => (0.80, 0.10),
            "vit_b" => (0.75, 0.30),
            "vit_l" => (0.80, 0.50),
            "vit_h" => (0.80, 0.55),
            "tiny_desk" => (0.80, 0.0),
            other => return Err(Error::UnknownModel(other.into())),
        };
        let (batch, lr) = if multi_task { (1024, 1e-3) } else { (REFERENCE_BATCH, 5e-4) };
        Ok(TrainConfig {
            base_lr: lr,
            layer_wise_decay: decay,
            drop_path: drop,
            batch_size: batch,
            warmup_iters: if multi_task { 500 } else { 0 },
            ..TrainConfig::default()
        })
    }

    /// Same recipe for another batch size, with the learning rate scaled
    /// linearly.
    pub fn scaled_to_batch(&self, batch_size: usize) -> Self {
        TrainConfig {
            base_lr: self.base_lr * batch_size as f64 / self.batch_size as f64,
            batch_size,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.layer_wise_decay > 0.0 && self.layer_wise_decay <= 1.0) {
            return bad(format!("layer_wise_decay {} outside (0, 1]", self.layer_wise_decay));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.sigma > 0.0) {
            return bad("base_lr and sigma must be positive, weight_decay nonnegative".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, epochs and checkpoint_every must be positive".into());
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_drop_epochs must be strictly ascending".into());
        }
        if self.lr_drop_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("lr_drop_epochs must lie before the last epoch".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_iters: self.warmup_iters,
            drop_epochs: self.lr_drop_epochs.clone(),
            drop_factor: self.lr_drop_factor,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Whether a checkpoint is due after `epoch` (0-based).
    pub fn checkpoint_due(&self, epoch: usize) -> bool {
        (epoch + 1).is_multiple_of(self.checkpoint_every) || epoch + 1 == self.epochs
    }
}

/// A whole image with every person in it, for bottom-up training.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor<f32>,
    /// Keypoints in image pixels, one list per person.
    pub people: Vec<Vec<Keypoint>>,
    pub task: usize,
}

impl From<&SynthImage> for Scene {
    fn from(img: &SynthImage) -> Self {
        Scene {
            image: img.pixels.clone(),
            people: img.instances.iter().map(|i| i.keypoints.clone()).collect(),
            task: img.instances.first().map_or(0, |i| i.task),
        }
    }
}

/// One task-homogeneous batch with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `[N, Cin, H, W]`.
    pub images: Tensor<T>,
    pub task: usize,
    /// `[N, Nk, h, w]`.
    pub targets: Tensor<T>,
    /// `[N * Nk]`.
    pub weights: Vec<T>,
    /// Ground-truth groups for the tag maps; empty for top-down batches.
    pub people: Vec<PersonJoints>,
    /// Teacher heatmaps `[N, Nk, h, w]`, filled on demand.
    pub teacher: Option<Tensor<T>>,
}

fn stack_images<T: Real>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("batch", "no samples"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape("batch", im.shape(), first.shape()));
        }
        data.extend(im.data().iter().map(|&v| T::of_f64(v as f64)));
    }
    Tensor::new(&shape, data)
}

fn image_hw(t: &Tensor<f32>) -> Result<(usize, usize)> {
    match t.shape() {
        [_, h, w] => Ok((*h, *w)),
        s => Err(Error::invalid("batch", format!("expected a [C, H, W] image, got {s:?}"))),
    }
}

fn single_task(tasks: impl Iterator<Item = usize>) -> Result<usize> {
    let mut tasks = tasks.peekable();
    let first = *tasks.peek().ok_or_else(|| Error::invalid("batch", "no samples"))?;
    if tasks.any(|t| t != first) {
        return Err(Error::invalid("batch", "samples from different tasks"));
    }
    Ok(first)
}

impl<T: Real> Batch<T> {
    /// Top-down batch from fixed-size crops.
    pub fn top_down(samples: &[&Sample], heatmap_hw: (usize, usize), sigma: f64) -> Result<Self> {
        let task = single_task(samples.iter().map(|s| s.task))?;
        let images = stack_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let in_hw = image_hw(&samples[0].image)?;
        let mut maps = Vec::new();
        let mut weights = Vec::new();
        for s in samples {
            let kps = rescale_keypoints(&s.keypoints, in_hw, heatmap_hw);
            let (m, w) = encode_targets::<T>(&kps, heatmap_hw, sigma)?;
            maps.push(m);
            weights.extend(w);
        }
        Ok(Batch {
            images,
            task,
            targets: Tensor::stack(&maps)?,
            weights,
            people: Vec::new(),
            teacher: None,
        })
    }

    /// Bottom-up batch from whole images. Each labeled keypoint that falls
    /// on the tag grid joins its person's group.
    pub fn bottom_up(scenes: &[&Scene], num_keypoints: usize, heatmap_hw: (usize, usize), sigma: f64) -> Result<Self> {
        let task = single_task(scenes.iter().map(|s| s.task))?;
        let images = stack_images(&scenes.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let in_hw = image_hw(&scenes[0].image)?;
        let (h, w) = heatmap_hw;
        let mut maps = Vec::new();
        let mut weights = Vec::new();
        let mut people = Vec::new();
        for (image, scene) in scenes.iter().enumerate() {
            let scaled: Vec<Vec<Keypoint>> = scene.people.iter().map(|p| rescale_keypoints(p, in_hw, heatmap_hw)).collect();
            let (m, wt) = encode_scene::<T>(&scaled, num_keypoints, heatmap_hw, sigma)?;
            maps.push(m);
            weights.extend(wt);
            for kps in &scaled {
                let joints = kps
                    .iter()
                    .enumerate()
                    .filter(|(_, k)| k.labeled())
                    .map(|(k, p)| (k, libm::round(p.y), libm::round(p.x)))
                    .filter(|&(_, y, x)| y >= 0.0 && x >= 0.0 && y < h as f64 && x < w as f64)
                    .map(|(k, y, x)| (k, y as usize, x as usize))
                    .collect();
                people.push(PersonJoints { image, joints });
            }
        }
        Ok(Batch {
            images,
            task,
            targets: Tensor::stack(&maps)?,
            weights,
            people,
            teacher: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-step record of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Learning-rate multiplier from the schedule.
    pub lr_scale: f64,
}

/// Supplies the mixed batches of one epoch, each split into task-homogeneous
/// micro-batches.
pub trait BatchSource<T: Real> {
    fn epoch(&mut self, epoch: usize) -> Result<Vec<Vec<Batch<T>>>>;
}

/// Training data held in memory, one pool per task.
#[derive(Debug, Clone)]
pub enum Pool {
    TopDown(Vec<Sample>),
    BottomUp { scenes: Vec<Scene>, num_keypoints: usize },
}

impl Pool {
    pub fn len(&self) -> usize {
        match self {
            Pool::TopDown(s) => s.len(),
            Pool::BottomUp { scenes, .. } => scenes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory [`BatchSource`] sampling uniformly over all pools.
#[derive(Debug, Clone)]
pub struct PoolSource {
    pub pools: Vec<Pool>,
    pub sampler: MultiTaskSampler,
    pub heatmap_hw: (usize, usize),
    pub sigma: f64,
}

impl PoolSource {
    pub fn new(pools: Vec<Pool>, batch_size: usize, seed: u64, heatmap_hw: (usize, usize), sigma: f64) -> Result<Self> {
        let sampler = MultiTaskSampler::new(pools.iter().map(Pool::len).collect(), batch_size, seed)?;
        Ok(PoolSource {
            pools,
            sampler,
            heatmap_hw,
            sigma,
        })
    }
}

impl<T: Real> BatchSource<T> for PoolSource {
    fn epoch(&mut self, epoch: usize) -> Result<Vec<Vec<Batch<T>>>> {
        self.sampler
            .epoch(epoch)
            .into_iter()
            .map(|mixed| {
                mixed
                    .into_iter()
                    .map(|mb| match &self.pools[mb.task] {
                        Pool::TopDown(s) => {
                            let picked: Vec<&Sample> = mb.indices.iter().map(|&i| &s[i]).collect();
                            let mut b = Batch::top_down(&picked, self.heatmap_hw, self.sigma)?;
                            b.task = mb.task;
                            Ok(b)
                        }
                        Pool::BottomUp { scenes, num_keypoints } => {
                            let picked: Vec<&Scene> = mb.indices.iter().map(|&i| &scenes[i]).collect();
                            let mut b = Batch::bottom_up(&picked, *num_keypoints, self.heatmap_hw, self.sigma)?;
                            b.task = mb.task;
                            Ok(b)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Owns a model and its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    model: PoseModel<T>,
    cfg: TrainConfig,
    opt: AdamW,
    state: AdamState<T>,
    schedule: LrSchedule,
    /// Learning rate of each store entry before the schedule.
    base_lrs: Vec<f64>,
    step: usize,
    rng: Rng,
    token: Option<Tensor<T>>,
    teacher: Option<PoseModel<T>>,
    trace: Vec<TraceRow>,
}

impl<T: Real> Trainer<T> {
    /// Applies the freeze mask and drop-path rate of `cfg` to `model`.
    pub fn new(mut model: PoseModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.set_drop_path(cfg.drop_path)?;
        model.apply_freeze(&cfg.freeze);
        let total = model.config().head_layer();
        let base_lrs = model
            .params()
            .infos()
            .iter()
            .map(|i| layerwise_lr(cfg.base_lr, cfg.layer_wise_decay, i.layer, total))
            .collect::<Result<_>>()?;
        Ok(Trainer {
            state: AdamState::new(model.params()),
            opt: cfg.optimizer(),
            schedule: cfg.schedule(),
            rng: Rng::new(cfg.seed),
            model,
            cfg,
            base_lrs,
            step: 0,
            token: None,
            teacher: None,
            trace: Vec::new(),
        })
    }

    /// Continues counting from `step`; stochastic depth draws depend only on
    /// the seed and the step index.
    pub fn resume_at(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    /// Fixed knowledge token `[C]` appended to the student's tokens.
    pub fn with_token(mut self, token: Tensor<T>) -> Result<Self> {
        let c = self.model.config().backbone.dim;
        if token.numel() != c {
            return Err(Error::shape("knowledge_token", token.shape(), &[c]));
        }
        self.token = Some(token.reshape(&[c])?);
        Ok(self)
    }

    /// Model whose heatmaps serve as output-distillation targets.
    pub fn with_teacher(mut self, teacher: PoseModel<T>) -> Self {
        self.teacher = Some(teacher);
        self
    }

    pub fn model(&self) -> &PoseModel<T> {
        &self.model
    }

    pub fn into_model(self) -> PoseModel<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    /// Learning rate of store entry `i` at the given point of the schedule.
    pub fn lr(&self, i: usize, step: usize, epoch: usize) -> f64 {
        self.base_lrs[i] * self.schedule.multiplier(step, epoch)
    }

    fn finished(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    fn batch_loss(&self, s: &mut Session<T>, b: &Batch<T>) -> Result<Var> {
        let x = s.g.constant(b.images.clone());
        let token = match (&self.token, self.cfg.distill.uses_token()) {
            (Some(t), true) => Some(s.g.constant(t.clone())),
            (None, true) => return Err(Error::invalid("train", "token distillation needs a knowledge token")),
            _ => None,
        };
        let out = self.model.forward_with_token(s, x, b.task, token)?;
        let mut loss = heatmap_mse(&mut s.g, out.heatmaps, &b.targets, &b.weights)?;
        if let Some(tags) = out.tags {
            let nk = self.model.config().tasks[b.task].num_keypoints;
            let ae = ae_loss(&mut s.g, tags, nk, &b.people)?;
            let ae = s.g.scale(ae, T::of_f64(self.cfg.ae_weight));
            loss = s.g.add(loss, ae)?;
        }
        if self.cfg.distill.uses_teacher_output() {
            let computed;
            let kt = match (&b.teacher, &self.teacher) {
                (Some(t), _) => t,
                (None, Some(teacher)) => {
                    computed = teacher.predict(&b.images, b.task)?.heatmaps;
                    &computed
                }
                (None, None) => return Err(Error::invalid("train", "output distillation needs teacher heatmaps")),
            };
            let od = output_distill(&mut s.g, out.heatmaps, kt)?;
            loss = s.g.add(loss, od)?;
        }
        Ok(loss)
    }

    /// One optimizer step over a mixed batch. Micro-batch losses are
    /// weighted by their share of the samples.
    pub fn step(&mut self, micro: &[Batch<T>], epoch: usize) -> Result<f64> {
        let total: usize = micro.iter().map(Batch::len).sum();
        if total == 0 {
            return Err(Error::invalid("train", "empty batch"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.model.params().len()];
        let mut bn = Vec::new();
        let mut loss = 0.0;
        for (j, b) in micro.iter().enumerate() {
            let rng = self.rng.fork(((self.step as u64) << 8) | j as u64);
            let mut s = Session::new(self.model.params(), Mode::Train).with_rng(rng);
            let l = self.batch_loss(&mut s, b)?;
            let share = b.len() as f64 / total as f64;
            let l = s.g.scale(l, T::of_f64(share));
            let r = s.backward(l)?;
            loss += r.loss.as_f64();
            for (acc, g) in grads.iter_mut().zip(r.grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
            bn.extend(r.bn_updates);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let mult = self.schedule.multiplier(self.step, epoch);
        let lrs: Vec<f64> = self.base_lrs.iter().map(|l| l * mult).collect();
        self.state.step(&self.opt, self.model.params_mut(), &grads, &lrs)?;
        self.model.params_mut().apply_bn_updates(&bn, BN_MOMENTUM);
        self.trace.push(TraceRow {
            step: self.step,
            epoch,
            loss,
            lr_scale: mult,
        });
        self.step += 1;
        Ok(loss)
    }

    /// Runs epochs until `cfg.epochs` or `cfg.max_steps`. `on_epoch` sees
    /// the trainer after each finished epoch, for example to checkpoint.
    pub fn run<S: BatchSource<T>>(
        &mut self,
        source: &mut S,
        mut on_epoch: impl FnMut(&Self, usize) -> Result<()>,
    ) -> Result<()> {
        for epoch in 0..self.cfg.epochs {
            if self.finished() {
                break;
            }
            for mixed in source.epoch(epoch)? {
                if self.finished() {
                    break;
                }
                self.step(&mixed, epoch)?;
            }
            on_epoch(self, epoch)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimConfig {
    pub mask_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MimConfig {
    fn default() -> Self {
        MimConfig {
            mask_ratio: 0.75,
            steps: 500,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

/// Pixel patches of `images [N, Cin, H, W]` as rows `[N, h*w, Cin*p*p]`,
/// one row per token in raster order.
pub fn patch_targets<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
        return Err(Error::invalid("patch_targets", format!("{s:?} is not a whole number of {patch}-pixel patches")));
    }
    let (n, c, hh, ww) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (hh / patch, ww / patch);
    let k = c * patch * patch;
    let d = images.data();
    Ok(Tensor::from_fn(&[n, h * w, k], |flat| {
        let (img, tok, col) = (flat / (h * w * k), (flat / k) % (h * w), flat % k);
        let (ch, i, j) = (col / (patch * patch), (col / patch) % patch, col % patch);
        let (y, x) = ((tok / w) * patch + i, (tok % w) * patch + j);
        d[((img * c + ch) * hh + y) * ww + x]
    }))
}

/// Reconstruction MSE of `pred [N, T, K]` against pixel patches, over the
/// masked tokens only. With nothing masked the loss is 0.
pub fn mim_loss<T: Real>(g: &mut Graph<T>, pred: Var, images: &Tensor<T>, patch: usize, masked: &[bool]) -> Result<Var> {
    let target = patch_targets(images, patch)?;
    if g.shape(pred) != target.shape() || masked.len() != target.shape()[0] * target.shape()[1] {
        return Err(Error::shape("mim_loss", g.shape(pred), target.shape()));
    }
    let weights = masked.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    g.weighted_mse(pred, &target, weights)
}

/// Masked-patch reconstruction on `images` (each `[Cin, H, W]`) with a
/// learned mask token and a linear head, both discarded afterwards. Only
/// the backbone of `model` changes. Returns the per-step loss trace.
pub fn pretrain_mim<T: Real>(model: &mut PoseModel<T>, images: &[Tensor<T>], cfg: &MimConfig) -> Result<Vec<f64>> {
    let bcfg = model.config().backbone.clone();
    if !(0.0..1.0).contains(&cfg.mask_ratio) {
        return Err(Error::invalid("pretrain_mim", "mask_ratio must lie in [0, 1)"));
    }
    if bcfg.stride != bcfg.patch_size || bcfg.patch_pad() != 0 {
        return Err(Error::invalid("pretrain_mim", "patches must tile the input without overlap"));
    }
    if images.is_empty() || cfg.batch_size == 0 {
        return Err(Error::invalid("pretrain_mim", "no images"));
    }
    let (c, p) = (bcfg.dim, bcfg.patch_size);
    let k = bcfg.in_channels * p * p;
    let mut rng = Rng::new(cfg.seed);
    let mut store = model.params().clone();
    let extra = |name: &str, kind, layer, decay| ParamInfo {
        name: name.into(),
        kind,
        layer,
        task: None,
        decay,
        fixed: false,
        frozen: false,
    };
    let head = model.config().head_layer();
    store.insert(extra("mim.mask_token", ParamKind::Embed, 0, false), Tensor::trunc_normal(&[1, c], 0.02, &mut rng))?;
    store.insert(extra("mim.head.w", ParamKind::Decoder, head, true), Tensor::trunc_normal(&[k, c, 1, 1], 0.02, &mut rng))?;
    store.insert(extra("mim.head.b", ParamKind::Decoder, head, false), Tensor::zeros(&[k]))?;
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut state = AdamState::new(&store);
    let lrs = vec![cfg.lr; store.len()];
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picked: Vec<Tensor<T>> = (0..cfg.batch_size).map(|_| images[rng.below(images.len())].clone()).collect();
        let batch = Tensor::stack(&picked)?;
        let grid = bcfg.grid((batch.shape()[2], batch.shape()[3]))?;
        let tokens = grid.0 * grid.1;
        let hide = libm::round(cfg.mask_ratio * tokens as f64) as usize;
        let mut masked = Vec::with_capacity(cfg.batch_size * tokens);
        for _ in 0..cfg.batch_size {
            let mut order: Vec<usize> = (0..tokens).collect();
            rng.shuffle(&mut order);
            let mut m = vec![false; tokens];
            order[..hide].iter().for_each(|&t| m[t] = true);
            masked.extend(m);
        }
        let mut s = Session::new(&store, Mode::Train).with_rng(rng.fork(step as u64));
        let x = s.g.constant(batch.clone());
        let token = s.p("mim.mask_token")?;
        let (feat, _) = masked_backbone(&mut s, model.config(), x, TokenMask { masked: &masked, token })?;
        let (w, b) = (s.p("mim.head.w")?, s.p("mim.head.b")?);
        let y = s.g.conv2d(feat, w, Some(b), 1, 0)?;
        let y = s.g.permute(y, &[0, 2, 3, 1])?;
        let y = s.g.reshape(y, &[cfg.batch_size, tokens, k])?;
        let loss = mim_loss(&mut s.g, y, &batch, p, &masked)?;
        let r = s.backward(loss)?;
        let l = r.loss.as_f64();
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.push(l);
        state.step(&opt, &mut store, &r.grads, &lrs)?;
        store.apply_bn_updates(&r.bn_updates, BN_MOMENTUM);
    }
    let params = model.params_mut();
    for i in 0..params.len() {
        *params.value_mut(i) = store.value(i).clone();
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::decode_keypoints;
    use crate::data::{synth_generate, top_down_crops};
    use crate::nn::{DecoderKind, ModelConfig, TaskSpec};

    fn tiny(nk: usize) -> ModelConfig {
        let mut cfg = ModelConfig::preset("tiny_desk").unwrap();
        cfg.tasks = vec![TaskSpec {
            name: "synth".into(),
            num_keypoints: nk,
        }];
        cfg
    }

    fn desk_cfg() -> TrainConfig {
        TrainConfig {
            base_lr: 2e-3,
            weight_decay: 1e-4,
            layer_wise_decay: 1.0,
            drop_path: 0.0,
            batch_size: 8,
            epochs: 10_000,
            lr_drop_epochs: vec![],
            warmup_iters: 0,
            ..TrainConfig::default()
        }
    }

    fn crops(n_images: usize, seed: u64) -> Vec<Sample> {
        let mut rng = Rng::new(seed);
        let imgs = synth_generate(n_images, (1, 1), 5, (32, 24), &mut rng).unwrap();
        top_down_crops(&imgs, (32, 24)).unwrap()
    }

    #[test]
    fn presets_follow_the_published_table() {
        let b = TrainConfig::preset("vit_b", false).unwrap();
        assert_eq!((b.layer_wise_decay, b.drop_path, b.batch_size, b.base_lr), (0.75, 0.30, 512, 5e-4));
        let h = TrainConfig::preset("vit_h", true).unwrap();
        assert_eq!((h.layer_wise_decay, h.drop_path, h.batch_size, h.base_lr), (0.80, 0.55, 1024, 1e-3));
        assert_eq!(h.warmup_iters, 500);
        let desk = h.scaled_to_batch(32);
        assert!((desk.base_lr - 1e-3 * 32.0 / 1024.0).abs() < 1e-18);
        assert!(TrainConfig::preset("vit_x", false).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { layer_wise_decay: 0.0, ..ok.clone() },
            TrainConfig { layer_wise_decay: 1.5, ..ok.clone() },
            TrainConfig { lr_drop_epochs: vec![200, 170], ..ok.clone() },
            TrainConfig { lr_drop_epochs: vec![170, 210], ..ok.clone() },
            TrainConfig { drop_path: 1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn checkpoints_fall_on_period_and_end() {
        let cfg = TrainConfig { epochs: 7, checkpoint_every: 3, lr_drop_epochs: vec![], ..TrainConfig::default() };
        let due: Vec<usize> = (0..7).filter(|&e| cfg.checkpoint_due(e)).collect();
        assert_eq!(due, vec![2, 5, 6]);
    }

    #[test]
    fn embed_and_head_learning_rates() {
        let mut rng = Rng::new(0);
        let model = PoseModel::<f64>::new(tiny(5), &mut rng).unwrap();
        let cfg = TrainConfig { layer_wise_decay: 0.5, ..desk_cfg() };
        let t = Trainer::new(model, cfg).unwrap();
        let p = t.model().params();
        let embed = p.index("patch_embed.w").unwrap();
        let head = p.infos().iter().position(|i| i.kind == ParamKind::Decoder).unwrap();
        assert_eq!(t.lr(head, 0, 0), 2e-3);
        // two blocks: embed sits three layers below the head
        assert_eq!(t.lr(embed, 0, 0), 2e-3 * 0.125);
    }

    #[test]
    fn top_down_batch_targets_peak_at_scaled_keypoints() {
        let samples = crops(2, 1);
        let refs: Vec<&Sample> = samples.iter().collect();
        let b = Batch::<f64>::top_down(&refs, (32, 24), 2.0).unwrap();
        assert_eq!(b.targets.shape(), &[2, 5, 32, 24]);
        let dec = decode_keypoints(&b.targets.index0(0)).unwrap();
        for (d, k) in dec.iter().zip(&samples[0].keypoints) {
            assert!((d.x - k.x).abs() <= 0.5 && (d.y - k.y).abs() <= 0.5);
        }
    }

    #[test]
    fn bottom_up_batch_lists_every_person() {
        let mut rng = Rng::new(2);
        let imgs = synth_generate(2, (3, 3), 5, (32, 48), &mut rng).unwrap();
        let scenes: Vec<Scene> = imgs.iter().map(Scene::from).collect();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let b = Batch::<f64>::bottom_up(&refs, 5, (16, 24), 2.0).unwrap();
        assert_eq!(b.people.len(), 6);
        assert!(b.people.iter().all(|p| p.joints.len() == 5));
        assert_eq!(b.weights.len(), 10);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let samples = crops(8, 3);
        let run = || {
            let mut rng = Rng::new(9);
            let model = PoseModel::<f32>::new(tiny(5), &mut rng).unwrap();
            let cfg = TrainConfig { drop_path: 0.2, max_steps: Some(6), ..desk_cfg() };
            let mut t = Trainer::new(model, cfg).unwrap();
            let mut src = PoolSource::new(vec![Pool::TopDown(samples.clone())], 4, 5, (32, 24), 2.0).unwrap();
            t.run(&mut src, |_, _| Ok(())).unwrap();
            (t.trace().to_vec(), t.model().params().checksum())
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert_eq!(ca, cb);
    }

    #[test]
    fn nan_input_aborts_with_step_index() {
        let samples = crops(2, 4);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut rng = Rng::new(0);
        let model = PoseModel::<f64>::new(tiny(5), &mut rng).unwrap();
        let mut t = Trainer::new(model, desk_cfg()).unwrap();
        let good = Batch::top_down(&refs, (32, 24), 2.0).unwrap();
        t.step(std::slice::from_ref(&good), 0).unwrap();
        let mut bad = good;
        bad.images.data_mut()[0] = f64::NAN;
        assert_eq!(t.step(&[bad], 0), Err(Error::NonFiniteLoss { step: 1 }));
    }

    #[test]
    fn frozen_attention_stays_bit_identical() {
        let samples = crops(4, 5);
        let refs: Vec<&Sample> = samples.iter().collect();
        let batch = Batch::<f32>::top_down(&refs, (32, 24), 2.0).unwrap();
        let mut rng = Rng::new(1);
        let model = PoseModel::<f32>::new(tiny(5), &mut rng).unwrap();
        let before = model.params().clone();
        let cfg = TrainConfig {
            freeze: FreezeMask { freeze_mhsa: true, ..FreezeMask::default() },
            ..desk_cfg()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        let first = t.step(std::slice::from_ref(&batch), 0).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = t.step(std::slice::from_ref(&batch), 0).unwrap();
        }
        assert!(last < first);
        let after = t.model().params();
        for (i, info) in after.infos().iter().enumerate() {
            if info.kind == ParamKind::Mhsa {
                assert_eq!(after.value(i), before.value(i), "{}", info.name);
            }
        }
    }

    #[test]
    fn mixed_batch_loss_is_sample_weighted() {
        let samples = crops(4, 6);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut rng = Rng::new(2);
        let model = PoseModel::<f64>::new(tiny(5), &mut rng).unwrap();
        let whole = Batch::top_down(&refs, (32, 24), 2.0).unwrap();
        let a = Batch::top_down(&refs[..1], (32, 24), 2.0).unwrap();
        let b = Batch::top_down(&refs[1..], (32, 24), 2.0).unwrap();
        let mut t1 = Trainer::new(model.clone(), desk_cfg()).unwrap();
        let mut t2 = Trainer::new(model, desk_cfg()).unwrap();
        let l1 = t1.step(&[whole], 0).unwrap();
        let l2 = t2.step(&[a, b], 0).unwrap();
        // eval-free tiny model has batch norm, so the split changes batch
        // statistics; both losses must still be close
        assert!((l1 - l2).abs() < 0.05 * l1, "{l1} vs {l2}");
    }

    #[test]
    fn output_distillation_requires_a_teacher() {
        let samples = crops(2, 7);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut rng = Rng::new(3);
        let model = PoseModel::<f64>::new(tiny(5), &mut rng).unwrap();
        let cfg = TrainConfig { distill: DistillMode::Output, ..desk_cfg() };
        let batch = Batch::top_down(&refs, (32, 24), 2.0).unwrap();
        let mut t = Trainer::new(model.clone(), cfg.clone()).unwrap();
        assert!(t.step(std::slice::from_ref(&batch), 0).is_err());
        let mut t = Trainer::new(model.clone(), cfg).unwrap().with_teacher(model.clone());
        t.step(std::slice::from_ref(&batch), 0).unwrap();
        let cfg = TrainConfig { distill: DistillMode::Token, ..desk_cfg() };
        let mut t = Trainer::new(model.clone(), cfg.clone()).unwrap();
        assert!(t.step(std::slice::from_ref(&batch), 0).is_err());
        assert!(Trainer::new(model.clone(), cfg.clone()).unwrap().with_token(Tensor::zeros(&[7])).is_err());
        let mut t = Trainer::new(model, cfg).unwrap().with_token(Tensor::zeros(&[32])).unwrap();
        t.step(&[batch], 0).unwrap();
    }

    #[test]
    fn bottom_up_step_runs() {
        let mut rng = Rng::new(4);
        let imgs = synth_generate(2, (2, 3), 5, (32, 32), &mut rng).unwrap();
        let mut cfg = tiny(5);
        cfg.decoder.kind = DecoderKind::BottomUpAe;
        cfg.backbone.input_hw = (32, 32);
        let model = PoseModel::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let hm = cfg.heatmap_hw((32, 32)).unwrap();
        let scenes = imgs.iter().map(Scene::from).collect();
        let mut src = PoolSource::new(vec![Pool::BottomUp { scenes, num_keypoints: 5 }], 2, 0, hm, 2.0).unwrap();
        let mut t = Trainer::new(model, TrainConfig { max_steps: Some(2), ..desk_cfg() }).unwrap();
        t.run(&mut src, |_, _| Ok(())).unwrap();
        assert_eq!(t.trace().len(), 2);
        assert!(t.trace().iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn patch_targets_tile_the_image() {
        let img = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let t = patch_targets(&img, 2).unwrap();
        assert_eq!(t.shape(), &[1, 4, 8]);
        // token 1 is the top-right patch; channel 0 rows 0..2, cols 2..4
        assert_eq!(&t.data()[8..12], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&t.data()[12..16], &[18.0, 19.0, 22.0, 23.0]);
        assert!(patch_targets(&img, 3).is_err());
    }

    #[test]
    fn visible_patches_get_no_gradient() {
        let mut rng = Rng::new(5);
        let img = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
        let mut g = Graph::new();
        let pred = g.param(Tensor::randn(&[1, 4, 4], &mut rng));
        let masked = [true, false, true, false];
        let l = mim_loss(&mut g, pred, &img, 2, &masked).unwrap();
        let grads = g.backward(l).unwrap();
        let gp = grads.get(pred).unwrap();
        for (tok, &m) in masked.iter().enumerate() {
            let row = &gp.data()[tok * 4..(tok + 1) * 4];
            assert_eq!(row.iter().any(|&v| v != 0.0), m);
        }
        let mut g = Graph::new();
        let pred = g.param(Tensor::randn(&[1, 4, 4], &mut rng));
        let l = mim_loss(&mut g, pred, &img, 2, &[false; 4]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn mim_reduces_reconstruction_loss_and_keeps_decoder() {
        let mut rng = Rng::new(6);
        let imgs = synth_generate(6, (1, 2), 5, (32, 24), &mut rng).unwrap();
        let images: Vec<Tensor<f32>> = imgs.iter().map(|i| i.pixels.clone()).collect();
        let mut model = PoseModel::<f32>::new(tiny(5), &mut rng).unwrap();
        let before = model.params().clone();
        let cfg = MimConfig { steps: 120, batch_size: 4, lr: 2e-3, ..MimConfig::default() };
        let trace = pretrain_mim(&mut model, &images, &cfg).unwrap();
        let head: f64 = trace[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = trace[trace.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        let after = model.params();
        assert!(after.index("mim.mask_token").is_err());
        for (i, info) in after.infos().iter().enumerate() {
            let same = after.value(i) == before.value(i);
            match info.kind {
                ParamKind::Decoder | ParamKind::Buffer => assert!(same, "{}", info.name),
                ParamKind::Mhsa | ParamKind::Ffn => assert!(!same, "{}", info.name),
                _ => {}
            }
        }
    }

    #[test]
    fn mim_rejects_overlapping_patches() {
        let mut rng = Rng::new(7);
        let mut cfg = tiny(5);
        cfg.backbone.stride = 2;
        let mut model = PoseModel::<f32>::new(cfg, &mut rng).unwrap();
        let img = Tensor::zeros(&[3, 32, 24]);
        assert!(pretrain_mim(&mut model, &[img], &MimConfig::default()).is_err());
    }
}
