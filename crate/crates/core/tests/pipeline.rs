use approx::assert_relative_eq;
use vitpose_core::codec::{decode_keypoints, encode_targets, rescale_keypoints, DEFAULT_SIGMA};
use vitpose_core::data::{synth_generate, top_down_crops, Sample};
use vitpose_core::metrics::{ap_ar_sweep, Instance};
use vitpose_core::nn::{ModelConfig, PoseModel, TaskSpec};
use vitpose_core::train::{Pool, PoolSource, TrainConfig, TraceRow, Trainer};
use vitpose_core::Rng;

const KEYPOINTS: usize = 13;

fn config() -> ModelConfig {
    let mut cfg = ModelConfig::preset("tiny_desk").unwrap();
    cfg.tasks = vec![TaskSpec {
        name: "synthetic".into(),
        num_keypoints: KEYPOINTS,
    }];
    cfg
}

fn crops(n: usize, seed: u64) -> Vec<Sample> {
    let images = synth_generate(n, (1, 1), KEYPOINTS, (64, 48), &mut Rng::new(seed)).unwrap();
    top_down_crops(&images, (32, 24)).unwrap()
}

#[test]
fn target_heatmaps_decode_back_to_their_keypoints() {
    let hw = config().heatmap_hw((32, 24)).unwrap();
    for s in crops(16, 1) {
        let kps = rescale_keypoints(&s.keypoints, (32, 24), hw);
        let (maps, weights) = encode_targets::<f64>(&kps, hw, DEFAULT_SIGMA).unwrap();
        let back = decode_keypoints(&maps).unwrap();
        for ((k, b), w) in kps.iter().zip(&back).zip(&weights) {
            if *w > 0.0 {
                assert!((k.x - b.x).abs() <= 0.5 + 1e-9 && (k.y - b.y).abs() <= 0.5 + 1e-9, "{k:?} -> {b:?}");
                assert_relative_eq!(b.score, 1.0);
            }
        }
    }
}

#[test]
fn ground_truth_used_as_predictions_scores_perfectly() {
    let images = synth_generate(10, (1, 3), KEYPOINTS, (96, 96), &mut Rng::new(2)).unwrap();
    let gt: Vec<Instance> = images
        .iter()
        .flat_map(|img| &img.instances)
        .map(|i| Instance {
            image_id: i.image_id,
            keypoints: i.keypoints.clone(),
            area: i.area,
            score: 1.0,
        })
        .collect();
    let sigmas = vec![0.079; KEYPOINTS];
    let sweep = ap_ar_sweep(&gt, &gt, &sigmas).unwrap();
    assert_relative_eq!(sweep.mean_ap(), 1.0);
    assert_relative_eq!(sweep.mean_recall(), 1.0);
}

#[test]
fn single_and_double_precision_models_agree() {
    let x = vitpose_core::Tensor::<f64>::uniform(&[2, 3, 32, 24], 0.0, 1.0, &mut Rng::new(5));
    let a = PoseModel::<f64>::new(config(), &mut Rng::new(3)).unwrap().predict(&x, 0).unwrap();
    let b = PoseModel::<f32>::new(config(), &mut Rng::new(3)).unwrap().predict(&x.cast(), 0).unwrap();
    let scale = a.heatmaps.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(a.heatmaps.cast::<f32>().max_abs_diff(&b.heatmaps) <= 1e-4 * scale.max(1.0));
}

fn short_run(steps: usize) -> Vec<TraceRow> {
    let cfg = TrainConfig {
        base_lr: 2e-3,
        weight_decay: 1e-4,
        drop_path: 0.0,
        batch_size: 8,
        epochs: steps,
        lr_drop_epochs: vec![],
        warmup_iters: 0,
        max_steps: Some(steps),
        seed: 11,
        ..TrainConfig::default()
    };
    let model = PoseModel::<f32>::new(config(), &mut Rng::new(7)).unwrap();
    let hw = model.config().heatmap_hw((32, 24)).unwrap();
    let mut source = PoolSource::new(vec![Pool::TopDown(crops(16, 4))], cfg.batch_size, cfg.seed, hw, cfg.sigma).unwrap();
    let mut trainer = Trainer::new(model, cfg).unwrap();
    trainer.run(&mut source, |_, _| Ok(())).unwrap();
    trainer.trace().to_vec()
}

#[test]
fn a_short_training_run_lowers_the_loss_and_repeats_exactly() {
    let trace = short_run(30);
    assert_eq!(trace.len(), 30);
    let head: f64 = trace[..4].iter().map(|r| r.loss).sum();
    let tail: f64 = trace[26..].iter().map(|r| r.loss).sum();
    assert!(tail < head, "loss {head} -> {tail}");
    assert_eq!(trace, short_run(30));
}
