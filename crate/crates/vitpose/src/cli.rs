//! The `vitpose` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use vitpose_core::codec::decode_keypoints;
use vitpose_core::data::DatasetSpec;
use vitpose_core::distill::optimize_knowledge_token;
use vitpose_core::flops::FLOP_CONVENTION;
use vitpose_core::metrics::{ap_ar_sweep, EvalReport};
use vitpose_core::nn::{AttentionMode, ModelConfig, ModelStats, PoseModel};
use vitpose_core::train::{pretrain_mim, Batch, BatchSource, DistillMode, Pool, PoolSource, Trainer};
use vitpose_core::{Rng, Tensor};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::coco::{ground_truth, load_predictions, parse_coco, to_coco, write_coco_json, CocoImage};
use crate::config::{apply_override, RunConfig, TaskData};
use crate::error::{Error, Result};
use crate::image_io::{read_image, write_image};
use crate::pipeline::{self, crops, evaluate, load_data, scenes, CropSource, Data, TaskSet};
use crate::report::{reference, rel_dev, write_csv, write_json, Reference, Report};

/// Stream of the seed generator used to initialise fresh models.
pub const INIT_STREAM: u64 = 0x1417;
/// Stream used to initialise the knowledge token.
pub const TOKEN_STREAM: u64 = 0x70CE;

#[derive(Debug, Parser)]
#[command(name = "vitpose", version, about = "Plain vision transformer pose estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; built-in defaults when omitted
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for initialisation, sampling and synthetic data
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Dotted configuration override such as model.moe.partition_ratio=0.25 (repeatable)
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, a loss trace and an evaluation
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from these weights instead of a random initialisation
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
        /// Teacher checkpoint for output distillation
        #[arg(long, value_name = "CKPT")]
        teacher: Option<PathBuf>,
    },
    /// Masked-patch reconstruction pre-training of the backbone
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Start from these weights instead of a random initialisation
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or score a prediction file against annotations
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model to evaluate on the configured validation data
        #[arg(long, value_name = "CKPT", conflicts_with_all = ["predictions", "annotations"])]
        checkpoint: Option<PathBuf>,
        /// COCO result list or annotation file
        #[arg(long, value_name = "JSON", requires = "annotations")]
        predictions: Option<PathBuf>,
        /// COCO annotation file with the ground truth
        #[arg(long, value_name = "JSON", requires = "predictions")]
        annotations: Option<PathBuf>,
    },
    /// Fit a knowledge token to a teacher, then train a student with it
    Distill {
        #[command(flatten)]
        common: Common,
        /// Trained teacher; its keypoint count must match the student's
        #[arg(long, value_name = "CKPT")]
        teacher: PathBuf,
    },
    /// Collapse a partially shared multi-task model into a single-task model
    Merge {
        #[command(flatten)]
        common: Common,
        /// Multi-task model with partially shared feed-forward layers
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Task whose expert and decoder are kept
        #[arg(long, default_value_t = 0)]
        task: usize,
    },
    /// Parameter and FLOP counts, with published figures where they exist
    Stats {
        #[command(flatten)]
        common: Common,
        /// Preset name (vit_s, vit_b, vit_l, vit_h, tiny_desk); the configured model otherwise
        #[arg(long)]
        model: Option<String>,
        /// Input size as HxW
        #[arg(long, value_parser = parse_hw)]
        input: Option<(usize, usize)>,
        /// Patch-embedding stride
        #[arg(long)]
        stride: Option<usize>,
        /// full, window, window_shift, window_pool or window_shift_pool
        #[arg(long, value_parser = parse_attention)]
        attention: Option<AttentionMode>,
        /// Window size as HxW
        #[arg(long, value_parser = parse_hw)]
        window: Option<(usize, usize)>,
    },
    /// Write a synthetic dataset as PNG images plus COCO annotations
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of images
        #[arg(long, default_value_t = 64)]
        images: usize,
        /// People per image, N or MIN-MAX
        #[arg(long, default_value = "1", value_parser = parse_range)]
        persons: (usize, usize),
        /// Keypoints per person, at most 13
        #[arg(long, default_value_t = 13)]
        keypoints: usize,
        /// Image size as HxW
        #[arg(long, default_value = "64x48", value_parser = parse_hw)]
        size: (usize, usize),
    },
    /// Write model inputs and output maps to a tensor container
    DumpHeatmaps {
        #[command(flatten)]
        common: Common,
        /// Model to run
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Image to run on; held-out synthetic crops when omitted
        #[arg(long, value_name = "PNG")]
        image: Option<PathBuf>,
        /// Task head to read
        #[arg(long, default_value_t = 0)]
        task: usize,
    },
}

pub fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not of the form HxW"))?;
    let p = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("`{v}` is not a positive integer"));
    Ok((p(h)?, p(w)?))
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    match s.split_once('-') {
        Some((a, b)) => Ok((p(a)?, p(b)?)),
        None => {
            let n = p(s)?;
            Ok((n, n))
        }
    }
}

fn parse_attention(s: &str) -> Result<AttentionMode, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| format!("`{s}`: expected full, window, window_shift, window_pool or window_shift_pool"))
}

impl Common {
    /// The run configuration with `--seed` applied before the overrides.
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.all_overrides())
    }

    /// The run configuration around a model read from a checkpoint, which
    /// replaces the configured one before validation.
    pub fn run_config_for(&self, model: &ModelConfig) -> Result<RunConfig> {
        let cfg = self.config_around(model)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// As [`Common::run_config_for`] but unvalidated, for commands that
    /// never read the configured data.
    fn config_around(&self, model: &ModelConfig) -> Result<RunConfig> {
        Ok(RunConfig {
            model: model.clone(),
            ..RunConfig::load_unchecked(self.config.as_deref(), &self.all_overrides())?
        })
    }

    fn all_overrides(&self) -> Vec<String> {
        let mut all = vec![format!("train.seed={}", self.seed), format!("mim.seed={}", self.seed)];
        all.extend(self.overrides.iter().cloned());
        all
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(Error::io(&self.out))?;
        Ok(&self.out)
    }

    fn report<R>(&self, command: &str, cfg: &RunConfig, body: R) -> Report<R> {
        Report {
            command: command.to_string(),
            config_digest: cfg.digest(),
            seed: self.seed,
            body,
        }
    }
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    pipeline::init_workers()?;
    match cli.command {
        Command::Train { common, init, teacher } => train(&common, init.as_deref(), teacher.as_deref()),
        Command::Pretrain { common, init } => pretrain(&common, init.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            predictions,
            annotations,
        } => match (checkpoint, predictions, annotations) {
            (_, Some(p), Some(a)) => eval_files(&common, &p, &a),
            (Some(c), None, None) => eval_checkpoint(&common, &c),
            _ => Err(Error::Config("eval needs --checkpoint, or --predictions with --annotations".into())),
        },
        Command::Distill { common, teacher } => distill(&common, &teacher),
        Command::Merge { common, checkpoint, task } => merge(&common, &checkpoint, task),
        Command::Stats {
            common,
            model,
            input,
            stride,
            attention,
            window,
        } => stats(&common, model.as_deref(), input, stride, attention, window),
        Command::Synth {
            common,
            images,
            persons,
            keypoints,
            size,
        } => synth(&common, images, persons, keypoints, size),
        Command::DumpHeatmaps {
            common,
            checkpoint,
            image,
            task,
        } => dump_heatmaps(&common, &checkpoint, image.as_deref(), task),
    }
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serialises"));
}

/// Model for `cfg`, either freshly initialised or with the weights of
/// `init`, whose layout must match.
fn initial_model(cfg: &RunConfig, init: Option<&Path>) -> Result<PoseModel<f32>> {
    match init {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let names: Vec<String> = ckpt.tensors.iter().map(|(n, _)| n.clone()).collect();
            let wanted = PoseModel::<f32>::new(cfg.model.clone(), &mut Rng::new(cfg.train.seed).fork(INIT_STREAM))?;
            // pre-training checkpoints may omit the decoders; keep fresh ones
            let tensors = wanted
                .params()
                .iter()
                .map(|(info, fresh)| match ckpt.get(&info.name) {
                    Some(t) => (info.name.clone(), t.clone()),
                    None => (info.name.clone(), fresh.clone()),
                })
                .collect();
            if !names.iter().any(|n| wanted.params().iter().any(|(i, _)| &i.name == n)) {
                return Err(Error::Config(format!("{}: no tensor matches the configured model", p.display())));
            }
            Ok(PoseModel::from_tensors(cfg.model.clone(), tensors)?)
        }
        None => Ok(PoseModel::new(cfg.model.clone(), &mut Rng::new(cfg.train.seed).fork(INIT_STREAM))?),
    }
}

enum Source {
    Crops(CropSource),
    Scenes(PoolSource),
}

impl BatchSource<f32> for Source {
    fn epoch(&mut self, epoch: usize) -> vitpose_core::Result<Vec<Vec<Batch<f32>>>> {
        match self {
            Source::Crops(s) => s.epoch(epoch),
            Source::Scenes(s) => s.epoch(epoch),
        }
    }
}

fn training_source(cfg: &RunConfig, data: &Data) -> Result<Source> {
    let input_hw = cfg.model.backbone.input_hw;
    if cfg.is_bottom_up() {
        let pools = data
            .train
            .iter()
            .map(|set| {
                Ok(Pool::BottomUp {
                    scenes: scenes(set, input_hw)?.into_iter().map(|(_, s, _)| s).collect(),
                    num_keypoints: set.spec.num_keypoints,
                })
            })
            .collect::<Result<_>>()?;
        let hm = cfg.model.heatmap_hw(input_hw)?;
        Ok(Source::Scenes(PoolSource::new(pools, cfg.train.batch_size, cfg.train.seed, hm, cfg.train.sigma)?))
    } else {
        Ok(Source::Crops(CropSource::new(data.train.clone(), cfg)?))
    }
}

#[derive(Serialize)]
struct TaskEval {
    task: String,
    #[serde(flatten)]
    report: EvalReport,
}

#[derive(Serialize)]
struct EvalBody {
    /// Mean AP over tasks.
    ap: f64,
    tasks: Vec<TaskEval>,
}

fn eval_sets(model: &PoseModel<f32>, sets: &[TaskSet], cfg: &RunConfig) -> Result<EvalBody> {
    let tasks: Vec<TaskEval> = sets
        .iter()
        .map(|set| {
            Ok(TaskEval {
                task: set.spec.name.clone(),
                report: evaluate(model, set, cfg)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalBody {
        ap: tasks.iter().map(|t| t.report.ap).sum::<f64>() / tasks.len().max(1) as f64,
        tasks,
    })
}

#[derive(Serialize)]
struct TrainBody {
    steps: usize,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
    eval: EvalBody,
}

fn fit(common: &Common, cfg: &RunConfig, mut trainer: Trainer<f32>, data: &Data) -> Result<(PoseModel<f32>, TrainBody)> {
    let out = common.out_dir()?.to_path_buf();
    let mut source = training_source(cfg, data)?;
    let digest = cfg.digest();
    trainer.run(&mut source, |tr, epoch| {
        if tr.config().checkpoint_due(epoch) {
            let ckpt = Checkpoint::from_model(tr.model())
                .with_progress(tr.steps_done() as u64, Some(tr.rng().state()))
                .with_extra("config_digest", digest.clone())
                .with_extra("epoch", epoch + 1);
            save_checkpoint(out.join(format!("ckpt_epoch{:04}.vpck", epoch + 1)), &ckpt)
                .map_err(|e| vitpose_core::Error::Config(e.to_string()))?;
        }
        Ok(())
    })?;
    write_csv(out.join("trace.csv"), trainer.trace())?;
    let ckpt = Checkpoint::from_model(trainer.model())
        .with_progress(trainer.steps_done() as u64, Some(trainer.rng().state()))
        .with_extra("config_digest", digest);
    save_checkpoint(out.join("final.vpck"), &ckpt)?;
    let body = TrainBody {
        steps: trainer.steps_done(),
        first_loss: trainer.trace().first().map(|r| r.loss),
        last_loss: trainer.trace().last().map(|r| r.loss),
        eval: EvalBody { ap: 0.0, tasks: vec![] },
    };
    let model = trainer.into_model();
    let eval = eval_sets(&model, &data.val, cfg)?;
    Ok((model, TrainBody { eval, ..body }))
}

fn load_teacher(path: &Path, cfg: &RunConfig) -> Result<PoseModel<f32>> {
    let teacher: PoseModel<f32> = load_checkpoint(path)?.to_model()?;
    let kinds = |m: &ModelConfig| m.tasks.iter().map(|t| t.num_keypoints).collect::<Vec<_>>();
    if kinds(teacher.config()) != kinds(&cfg.model) {
        return Err(Error::Config(format!("{}: teacher tasks differ from the student's", path.display())));
    }
    Ok(teacher)
}

fn train(common: &Common, init: Option<&Path>, teacher: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    fs::write(out.join("config.json"), cfg.to_json()).map_err(Error::io(out))?;
    if cfg.train.distill.uses_token() {
        return Err(Error::Config("token distillation runs through the distill command".into()));
    }
    let data = load_data(&cfg, cfg.train.seed)?;
    let mut trainer = Trainer::new(initial_model(&cfg, init)?, cfg.train.clone())?;
    match (cfg.train.distill.uses_teacher_output(), teacher) {
        (true, Some(t)) => trainer = trainer.with_teacher(load_teacher(t, &cfg)?),
        (true, None) => return Err(Error::Config("output distillation needs --teacher".into())),
        (false, Some(_)) => return Err(Error::Config("--teacher given but train.distill is none".into())),
        (false, None) => {}
    }
    let (_, body) = fit(common, &cfg, trainer, &data)?;
    let report = common.report("train", &cfg, body);
    write_json(out.join("report.json"), &report)?;
    print_json(&report);
    Ok(())
}

#[derive(Serialize)]
struct MimRow {
    step: usize,
    loss: f64,
}

fn pretrain(common: &Common, init: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let data = load_data(&cfg, cfg.train.seed)?;
    let input_hw = cfg.model.backbone.input_hw;
    let mut images = Vec::new();
    for set in &data.train {
        images.extend(crops(set, input_hw)?.into_iter().map(|(s, _)| s.image));
    }
    let mut model = initial_model(&cfg, init)?;
    let losses = pretrain_mim(&mut model, &images, &cfg.mim)?;
    let rows: Vec<MimRow> = losses.iter().enumerate().map(|(step, &loss)| MimRow { step, loss }).collect();
    write_csv(out.join("mim_trace.csv"), &rows)?;
    let ckpt = Checkpoint::from_model(&model)
        .with_progress(losses.len() as u64, None)
        .with_extra("config_digest", cfg.digest());
    save_checkpoint(out.join("pretrained.vpck"), &ckpt)?;
    let report = common.report(
        "pretrain",
        &cfg,
        json!({ "steps": losses.len(), "first_loss": losses.first(), "last_loss": losses.last() }),
    );
    write_json(out.join("report.json"), &report)?;
    print_json(&report);
    Ok(())
}

fn eval_checkpoint(common: &Common, path: &Path) -> Result<()> {
    let model: PoseModel<f32> = load_checkpoint(path)?.to_model()?;
    let cfg = common.run_config_for(model.config())?;
    let out = common.out_dir()?;
    let data = load_data(&cfg, cfg.train.seed)?;
    let report = common.report("eval", &cfg, eval_sets(&model, &data.val, &cfg)?);
    write_json(out.join("eval.json"), &report)?;
    print_json(&report);
    Ok(())
}

/// Keypoint count of an annotation file, from its first category or
/// annotation.
fn keypoints_in(text: &str) -> Result<usize> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let from_cat = v["categories"][0]["keypoints"].as_array().map(Vec::len).filter(|&n| n > 0);
    let from_ann = v["annotations"][0]["keypoints"].as_array().map(|a| a.len() / 3);
    from_cat
        .or(from_ann)
        .ok_or_else(|| Error::Config("cannot tell the keypoint count of the annotation file".into()))
}

/// Dataset description for scoring files: the configured COCO task with
/// that many keypoints, else the standard COCO or synthetic layout.
fn spec_for(cfg: &RunConfig, nk: usize) -> Result<DatasetSpec> {
    for t in &cfg.data.tasks {
        if let TaskData::Coco { spec, .. } = t {
            if spec.num_keypoints == nk {
                return Ok(spec.clone());
            }
        }
    }
    if nk == 17 {
        return Ok(DatasetSpec::coco());
    }
    Ok(DatasetSpec::synthetic(nk)?)
}

fn eval_files(common: &Common, predictions: &Path, annotations: &Path) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let text = fs::read_to_string(annotations).map_err(Error::io(annotations))?;
    let spec = spec_for(&cfg, keypoints_in(&text)?)?;
    let gt = ground_truth(&parse_coco(&text, &spec)?.instances);
    let preds = load_predictions(predictions, &spec)?;
    let report = EvalReport::from_sweep(&ap_ar_sweep(&preds, &gt, &spec.sigmas)?);
    let body = EvalBody {
        ap: report.ap,
        tasks: vec![TaskEval {
            task: spec.name.clone(),
            report,
        }],
    };
    let report = common.report("eval", &cfg, body);
    write_json(out.join("eval.json"), &report)?;
    print_json(&report);
    Ok(())
}

fn distill(common: &Common, teacher_path: &Path) -> Result<()> {
    let mut cfg = common.run_config()?;
    if cfg.train.distill == DistillMode::None {
        cfg.train.distill = DistillMode::Token;
    }
    let out = common.out_dir()?;
    fs::write(out.join("config.json"), cfg.to_json()).map_err(Error::io(out))?;
    let teacher = load_teacher(teacher_path, &cfg)?;
    let data = load_data(&cfg, cfg.train.seed)?;
    let batches: Vec<Batch<f32>> = training_source(&cfg, &data)?.epoch(0)?.into_iter().flatten().collect();
    let mut rng = Rng::new(cfg.train.seed).fork(TOKEN_STREAM);
    let token = optimize_knowledge_token(&teacher, &batches, cfg.distill.token_steps, cfg.distill.token_lr, &mut rng)?;
    let file = Checkpoint::from_tensors(vec![("knowledge_token".into(), token.token.clone())])
        .with_extra("source_teacher", token.source_teacher.to_string())
        .with_extra("trace", token.trace.clone())
        .with_extra("config_digest", cfg.digest());
    save_checkpoint(out.join("token.vpck"), &file)?;

    let mut trainer = Trainer::new(initial_model(&cfg, None)?, cfg.train.clone())?.with_token(token.token.clone())?;
    if cfg.train.distill.uses_teacher_output() {
        trainer = trainer.with_teacher(teacher);
    }
    let (model, body) = fit(common, &cfg, trainer, &data)?;
    save_checkpoint(
        out.join("student.vpck"),
        &Checkpoint::from_model(&model).with_extra("config_digest", cfg.digest()),
    )?;
    let report = common.report(
        "distill",
        &cfg,
        json!({
            "token_first_loss": token.trace.first(),
            "token_last_loss": token.trace.last(),
            "student": body,
        }),
    );
    write_json(out.join("report.json"), &report)?;
    print_json(&report);
    Ok(())
}

fn merge(common: &Common, path: &Path, task: usize) -> Result<()> {
    let model: PoseModel<f32> = load_checkpoint(path)?.to_model()?;
    let cfg = common.config_around(model.config())?;
    let out = common.out_dir()?;
    let merged = model.merge_for_inference(task)?;
    save_checkpoint(out.join("merged.vpck"), &Checkpoint::from_model(&merged))?;
    let report = common.report(
        "merge",
        &cfg,
        json!({
            "task": model.config().tasks[task].name,
            "params_before": model.params().iter().map(|(_, t)| t.numel()).sum::<usize>(),
            "params_after": merged.params().iter().map(|(_, t)| t.numel()).sum::<usize>(),
        }),
    );
    write_json(out.join("report.json"), &report)?;
    print_json(&report);
    Ok(())
}

#[derive(Serialize)]
struct StatsBody {
    model: String,
    input_hw: (usize, usize),
    stride: usize,
    attention: AttentionMode,
    window: (usize, usize),
    #[serde(flatten)]
    stats: ModelStats,
    /// Backbone only, the quantity published for each size.
    gflops: f64,
    gflops_total: f64,
    flop_convention: &'static str,
    reference: Option<Reference>,
    gflops_rel_dev: Option<f64>,
    params_rel_dev: Option<f64>,
}

fn stats(
    common: &Common,
    preset: Option<&str>,
    input: Option<(usize, usize)>,
    stride: Option<usize>,
    attention: Option<AttentionMode>,
    window: Option<(usize, usize)>,
) -> Result<()> {
    let (name, mut model) = match preset {
        Some(name) => {
            let mut v = json!({ "model": ModelConfig::preset(name)? });
            for o in common.overrides.iter().filter(|o| o.starts_with("model.")) {
                apply_override(&mut v, o)?;
            }
            if let Some(o) = common.overrides.iter().find(|o| !o.starts_with("model.")) {
                return Err(Error::Config(format!("stats --model only takes model.* overrides, got `{o}`")));
            }
            let m: ModelConfig = serde_json::from_value(v["model"].take()).map_err(|e| Error::Config(e.to_string()))?;
            (name.to_string(), m)
        }
        None => ("configured".to_string(), common.run_config()?.model),
    };
    let b = &mut model.backbone;
    if let Some(hw) = input {
        b.input_hw = hw;
    }
    if let Some(s) = stride {
        b.stride = s;
    }
    if let Some(a) = attention {
        b.attention = a;
    }
    if let Some(w) = window {
        b.window = w;
    }
    model.validate()?;
    let digest_cfg = RunConfig {
        model: model.clone(),
        ..RunConfig::default()
    };
    let s = vitpose_core::nn::model_stats(&model, model.backbone.input_hw)?;
    let r = reference(&name, &model);
    let b = &model.backbone;
    let body = StatsBody {
        model: name,
        input_hw: b.input_hw,
        stride: b.stride,
        attention: b.attention,
        window: b.window,
        gflops: s.backbone_gflops(),
        gflops_total: s.total_gflops(),
        flop_convention: FLOP_CONVENTION,
        gflops_rel_dev: r.map(|r| rel_dev(s.backbone_gflops(), r.gflops)),
        params_rel_dev: r.and_then(|r| r.params_m).map(|p| rel_dev(s.params as f64 / 1e6, p)),
        reference: r,
        stats: s,
    };
    let out = common.out_dir()?;
    let report = common.report("stats", &digest_cfg, body);
    write_json(out.join("stats.json"), &report)?;
    print_json(&report);
    Ok(())
}

fn synth(common: &Common, images: usize, persons: (usize, usize), keypoints: usize, size: (usize, usize)) -> Result<()> {
    let out = common.out_dir()?;
    let spec = DatasetSpec::synthetic(keypoints)?;
    let generated = vitpose_core::data::synth_generate(images, persons, keypoints, size, &mut Rng::new(common.seed))?;
    let dir = out.join("images");
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let mut coco_images = Vec::with_capacity(generated.len());
    let mut instances = Vec::new();
    for img in &generated {
        let file_name = format!("{:06}.png", img.id);
        write_image(dir.join(&file_name), &img.pixels)?;
        coco_images.push(CocoImage {
            id: img.id,
            file_name: format!("images/{file_name}"),
            width: size.1 as u32,
            height: size.0 as u32,
        });
        instances.extend(img.instances.iter().cloned());
    }
    write_coco_json(out.join("annotations.json"), &to_coco(&coco_images, &instances, &spec))?;
    let summary = json!({
        "command": "synth",
        "seed": common.seed,
        "images": generated.len(),
        "instances": instances.len(),
        "annotations": out.join("annotations.json"),
    });
    print_json(&summary);
    Ok(())
}

fn dump_heatmaps(common: &Common, path: &Path, image: Option<&Path>, task: usize) -> Result<()> {
    let out = common.out_dir()?;
    let model: PoseModel<f32> = load_checkpoint(path)?.to_model()?;
    model.config().check_task(task)?;
    let input_hw = model.config().backbone.input_hw;
    // the configured data only matters when it supplies the inputs
    let cfg = match image {
        Some(_) => common.config_around(model.config())?,
        None => common.run_config_for(model.config())?,
    };
    let inputs: Vec<Tensor<f32>> = match image {
        Some(p) => {
            let px = read_image(p)?;
            let t = pipeline::whole_image_transform((px.shape()[1], px.shape()[2]), input_hw);
            vec![vitpose_core::data::warp(&px, &t)?]
        }
        None => {
            let data = load_data(&cfg, cfg.train.seed)?;
            let set = &data.val[task];
            if cfg.is_bottom_up() {
                scenes(set, input_hw)?.into_iter().map(|(_, s, _)| s.image).take(pipeline::EVAL_BATCH).collect()
            } else {
                crops(set, input_hw)?.into_iter().map(|(s, _)| s.image).take(pipeline::EVAL_BATCH).collect()
            }
        }
    };
    let batch = Tensor::stack(&inputs)?;
    let pred = model.predict(&batch, task)?;
    let mut decoded = Vec::new();
    for n in 0..inputs.len() {
        let kps = decode_keypoints(&pred.heatmaps.index0(n))?;
        decoded.extend(kps.iter().flat_map(|k| [k.x as f32, k.y as f32, k.score as f32]));
    }
    let nk = model.config().tasks[task].num_keypoints;
    let mut tensors = vec![
        ("input".to_string(), batch),
        ("heatmaps".to_string(), pred.heatmaps),
        ("keypoints".to_string(), Tensor::new(&[inputs.len(), nk, 3], decoded)?),
    ];
    if let Some(t) = pred.tags {
        tensors.push(("tags".to_string(), t));
    }
    let ckpt = Checkpoint::from_tensors(tensors)
        .with_extra("config_digest", cfg.digest())
        .with_extra("task", task);
    save_checkpoint(out.join("heatmaps.vpck"), &ckpt)?;
    print_json(&json!({ "command": "dump-heatmaps", "images": inputs.len(), "file": out.join("heatmaps.vpck") }));
    Ok(())
}
