//! Turns a [`RunConfig`] into training sources and evaluation results.
//!
//! Crops are cut in parallel on the rayon pool. Every sample draws its
//! augmentation from a generator derived from `(seed, epoch, task, index)`,
//! so batches do not depend on the number of workers.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use vitpose_core::codec::{ae_group, decode_keypoints, rescale_keypoints, Keypoint};
use vitpose_core::data::{crop_affine, synth_generate, warp, Augment, CropTransform, DatasetSpec, MultiTaskSampler, PoseInstance, Sample};
use vitpose_core::metrics::{ap_ar_sweep, EvalReport, Instance};
use vitpose_core::nn::PoseModel;
use vitpose_core::train::{Batch, BatchSource, Scene};
use vitpose_core::{Real, Rng, Tensor};

use crate::coco::{ground_truth, load_coco_json};
use crate::config::{RunConfig, TaskData};
use crate::error::{Error, Result};
use crate::image_io::read_image;

/// Environment variable capping the number of data-pipeline threads.
pub const WORKERS_ENV: &str = "POSE_NUM_WORKERS";

/// Stream of the seed generator that synthetic data is drawn from.
pub const DATA_STREAM: u64 = 0xDA7A;

/// Sizes the global rayon pool from [`WORKERS_ENV`]. Calling it again, or
/// after the pool has started, has no effect.
pub fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV}={raw:?} is not a positive integer")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Images and annotations of one task.
#[derive(Debug, Clone)]
pub struct TaskSet {
    pub spec: DatasetSpec,
    /// Pixels by image id.
    pub images: BTreeMap<u64, Tensor<f32>>,
    pub instances: Vec<PoseInstance>,
}

impl TaskSet {
    fn image(&self, id: u64) -> Result<&Tensor<f32>> {
        self.images
            .get(&id)
            .ok_or_else(|| Error::Config(format!("{}: no pixels for image {id}", self.spec.name)))
    }

    fn image_ids(&self) -> Vec<u64> {
        self.images.keys().copied().collect()
    }
}

/// Training and evaluation data of every task.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: Vec<TaskSet>,
    pub val: Vec<TaskSet>,
}

fn synthetic_set(task: usize, name: &str, images: usize, persons: (usize, usize), nk: usize, hw: (usize, usize), rng: &mut Rng) -> Result<TaskSet> {
    let spec = DatasetSpec {
        name: name.to_string(),
        task_id: task,
        ..DatasetSpec::synthetic(nk)?
    };
    let mut set = TaskSet {
        spec,
        images: BTreeMap::new(),
        instances: Vec::new(),
    };
    for img in synth_generate(images, persons, nk, hw, rng)? {
        set.instances.extend(img.instances.into_iter().map(|i| PoseInstance { task, ..i }));
        set.images.insert(img.id, img.pixels);
    }
    Ok(set)
}

fn coco_set(task: usize, spec: &DatasetSpec, annotations: &str) -> Result<TaskSet> {
    let spec = DatasetSpec {
        task_id: task,
        ..spec.clone()
    };
    let ds = load_coco_json(annotations, &spec)?;
    let root = match spec.image_root.as_str() {
        "" => Path::new(annotations).parent().unwrap_or(Path::new("")),
        r => Path::new(r),
    };
    let mut images = BTreeMap::new();
    for im in &ds.images {
        if ds.instances.iter().any(|i| i.image_id == im.id) {
            images.insert(im.id, read_image(root.join(&im.file_name))?);
        }
    }
    Ok(TaskSet {
        spec,
        images,
        instances: ds.instances,
    })
}

/// Builds every task's data. Synthetic tasks draw their training and
/// held-out images from separate streams of `seed`.
pub fn load_data(cfg: &RunConfig, seed: u64) -> Result<Data> {
    let root = Rng::new(seed).fork(DATA_STREAM);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (t, (data, task)) in cfg.data.tasks.iter().zip(&cfg.model.tasks).enumerate() {
        match data {
            TaskData::Synthetic {
                images,
                persons,
                num_keypoints,
                image_hw,
            } => {
                let s = 2 * t as u64;
                train.push(synthetic_set(t, &task.name, *images, *persons, *num_keypoints, *image_hw, &mut root.fork(s))?);
                val.push(synthetic_set(t, &task.name, cfg.data.val_images, *persons, *num_keypoints, *image_hw, &mut root.fork(s + 1))?);
            }
            TaskData::Coco { spec, val_annotation_path } => {
                let tr = coco_set(t, spec, &spec.annotation_path)?;
                val.push(match val_annotation_path {
                    Some(p) => coco_set(t, spec, p)?,
                    None => tr.clone(),
                });
                train.push(tr);
            }
        }
    }
    Ok(Data { train, val })
}

/// Maps a whole `hw` image onto `output`, padding the shorter side so the
/// aspect ratio is kept.
pub fn whole_image_transform((h, w): (usize, usize), output: (usize, usize)) -> CropTransform {
    let aspect = output.1 as f64 / output.0 as f64;
    let (mut sw, mut sh) = (w as f64, h as f64);
    if sw > aspect * sh {
        sh = sw / aspect;
    } else {
        sw = sh * aspect;
    }
    CropTransform {
        center: ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
        scale: (sw, sh),
        rotation: 0.0,
        output,
        flip: false,
    }
}

fn image_hw(t: &Tensor<f32>) -> (usize, usize) {
    let s = t.shape();
    (s[1], s[2])
}

/// Whole-image samples of a task, resized to the model input.
pub fn scenes(set: &TaskSet, input_hw: (usize, usize)) -> Result<Vec<(u64, Scene, CropTransform)>> {
    set.image_ids()
        .into_par_iter()
        .map(|id| {
            let pixels = set.image(id)?;
            let t = whole_image_transform(image_hw(pixels), input_hw);
            let image = if image_hw(pixels) == input_hw { pixels.clone() } else { warp(pixels, &t)? };
            let people = set
                .instances
                .iter()
                .filter(|i| i.image_id == id)
                .map(|i| t.keypoints(&i.keypoints, &[]))
                .collect();
            Ok((
                id,
                Scene {
                    image,
                    people,
                    task: set.spec.task_id,
                },
                t,
            ))
        })
        .collect()
}

/// Top-down crops of every instance without augmentation.
pub fn crops(set: &TaskSet, input_hw: (usize, usize)) -> Result<Vec<(Sample, CropTransform)>> {
    set.instances
        .par_iter()
        .map(|inst| {
            let t = CropTransform::from_box(inst.bbox, input_hw)?;
            let image = warp(set.image(inst.image_id)?, &t)?;
            Ok((
                Sample {
                    image,
                    keypoints: t.keypoints(&inst.keypoints, &[]),
                    task: inst.task,
                },
                t,
            ))
        })
        .collect()
}

/// Top-down training source that re-crops and augments every epoch.
#[derive(Debug, Clone)]
pub struct CropSource {
    sets: Vec<TaskSet>,
    sampler: MultiTaskSampler,
    input_hw: (usize, usize),
    heatmap_hw: (usize, usize),
    sigma: f64,
    augment: Augment,
    seed: u64,
}

impl CropSource {
    pub fn new(sets: Vec<TaskSet>, cfg: &RunConfig) -> Result<Self> {
        let input_hw = cfg.model.backbone.input_hw;
        let sampler = MultiTaskSampler::new(sets.iter().map(|s| s.instances.len()).collect(), cfg.train.batch_size, cfg.train.seed)?;
        Ok(CropSource {
            sets,
            sampler,
            input_hw,
            heatmap_hw: cfg.model.heatmap_hw(input_hw)?,
            sigma: cfg.train.sigma,
            augment: cfg.data.augment,
            seed: cfg.train.seed,
        })
    }

    fn sample(&self, epoch: usize, task: usize, index: usize) -> Result<Sample> {
        let set = &self.sets[task];
        let inst = &set.instances[index];
        let mut rng = Rng::new(self.seed).fork(epoch as u64).fork(((task as u64) << 32) | index as u64);
        let (image, keypoints, _) = crop_affine(set.image(inst.image_id)?, inst, self.input_hw, &self.augment, &set.spec.flip_pairs, &mut rng)?;
        Ok(Sample {
            image,
            keypoints,
            task,
        })
    }
}

impl<T: Real> BatchSource<T> for CropSource {
    fn epoch(&mut self, epoch: usize) -> vitpose_core::Result<Vec<Vec<Batch<T>>>> {
        let plan = self.sampler.epoch(epoch);
        plan.into_iter()
            .map(|mixed| {
                mixed
                    .into_iter()
                    .map(|mb| {
                        let samples: Vec<Sample> = mb
                            .indices
                            .par_iter()
                            .map(|&i| self.sample(epoch, mb.task, i))
                            .collect::<Result<_>>()
                            .map_err(|e| vitpose_core::Error::Config(format!("crop source: {e}")))?;
                        let refs: Vec<&Sample> = samples.iter().collect();
                        Batch::top_down(&refs, self.heatmap_hw, self.sigma)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Number of images run through the model at once during evaluation.
pub const EVAL_BATCH: usize = 16;

fn stack<T: Real>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let cast: Vec<Tensor<T>> = images.iter().map(|t| t.cast::<T>()).collect();
    Ok(Tensor::stack(&cast)?)
}

/// Mean heatmap peak value of the labeled keypoints, or of all of them.
fn instance_score(kps: &[Keypoint]) -> f64 {
    if kps.is_empty() {
        return 0.0;
    }
    kps.iter().map(|k| k.score).sum::<f64>() / kps.len() as f64
}

/// Top-down predictions for every ground-truth box of `set`, in source
/// image coordinates.
pub fn predict_top_down<T: Real>(model: &PoseModel<T>, set: &TaskSet) -> Result<Vec<Instance>> {
    let input_hw = model.config().backbone.input_hw;
    let hm_hw = model.config().heatmap_hw(input_hw)?;
    let task = set.spec.task_id;
    let cropped = crops(set, input_hw)?;
    let mut out = Vec::with_capacity(cropped.len());
    for (chunk, insts) in cropped.chunks(EVAL_BATCH).zip(set.instances.chunks(EVAL_BATCH)) {
        let images = stack::<T>(&chunk.iter().map(|(s, _)| &s.image).collect::<Vec<_>>())?;
        let heatmaps = model.predict(&images, task)?.heatmaps;
        for (n, ((_, t), inst)) in chunk.iter().zip(insts).enumerate() {
            let kps = decode_keypoints(&heatmaps.index0(n))?;
            let kps = t.keypoints_back(&rescale_keypoints(&kps, hm_hw, input_hw), &[]);
            out.push(Instance {
                image_id: inst.image_id,
                score: instance_score(&kps),
                keypoints: kps,
                area: inst.area,
            });
        }
    }
    Ok(out)
}

/// Bottom-up predictions: every grouped person of every image of `set`.
pub fn predict_bottom_up<T: Real>(model: &PoseModel<T>, set: &TaskSet, group: &vitpose_core::codec::GroupConfig) -> Result<Vec<Instance>> {
    let input_hw = model.config().backbone.input_hw;
    let hm_hw = model.config().heatmap_hw(input_hw)?;
    let task = set.spec.task_id;
    let all = scenes(set, input_hw)?;
    let mut out = Vec::new();
    for chunk in all.chunks(EVAL_BATCH) {
        let images = stack::<T>(&chunk.iter().map(|(_, s, _)| &s.image).collect::<Vec<_>>())?;
        let pred = model.predict(&images, task)?;
        let tags = pred
            .tags
            .ok_or_else(|| Error::Config("bottom-up evaluation needs a model with tag maps".into()))?;
        for (n, (id, _, t)) in chunk.iter().enumerate() {
            for person in ae_group(&pred.heatmaps.index0(n), &tags.index0(n), group)? {
                let kps: Vec<Keypoint> = person
                    .keypoints
                    .iter()
                    .map(|k| k.unwrap_or(Keypoint::new(0.0, 0.0, 0)))
                    .collect();
                let kps = t.keypoints_back(&rescale_keypoints(&kps, hm_hw, input_hw), &[]);
                let area = vitpose_core::data::keypoint_box(&kps).map_or(0.0, |b| b[2] * b[3]);
                out.push(Instance {
                    image_id: *id,
                    keypoints: kps,
                    area,
                    score: person.score,
                });
            }
        }
    }
    Ok(out)
}

/// AP/AR of `model` on `set`, with parameter and backbone FLOP counts.
pub fn evaluate<T: Real>(model: &PoseModel<T>, set: &TaskSet, cfg: &RunConfig) -> Result<EvalReport> {
    let preds = if cfg.is_bottom_up() {
        predict_bottom_up(model, set, &cfg.group)?
    } else {
        predict_top_down(model, set)?
    };
    let sweep = ap_ar_sweep(&preds, &ground_truth(&set.instances), &set.spec.sigmas)?;
    let stats = model.stats(model.config().backbone.input_hw)?;
    Ok(EvalReport::from_sweep(&sweep).with_model_stats(stats.params as u64, stats.backbone_gflops()))
}

/// Mean Euclidean keypoint error in heatmap pixels over the labeled
/// keypoints of top-down crops.
pub fn mean_heatmap_error<T: Real>(model: &PoseModel<T>, samples: &[Sample]) -> Result<f64> {
    let input_hw = model.config().backbone.input_hw;
    let hm_hw = model.config().heatmap_hw(input_hw)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in samples.chunk_by(|a, b| a.task == b.task).flat_map(|run| run.chunks(EVAL_BATCH)) {
        let task = chunk[0].task;
        let images = stack::<T>(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let heatmaps = model.predict(&images, task)?.heatmaps;
        for (n, s) in chunk.iter().enumerate() {
            let pred = decode_keypoints(&heatmaps.index0(n))?;
            let gt = rescale_keypoints(&s.keypoints, input_hw, hm_hw);
            for (p, g) in pred.iter().zip(&gt).filter(|(_, g)| g.labeled()) {
                sum += ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}
