use std::path::PathBuf;

use vitpose::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use vitpose::coco::{load_coco_json, to_coco, write_coco_json, CocoImage};
use vitpose_core::data::{synth_generate, DatasetSpec};
use vitpose_core::nn::{DecoderKind, ModelConfig, PoseModel};
use vitpose_core::{Rng, Tensor};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn coco_person_keypoints_file_loads_unchanged() {
    let ds = load_coco_json(fixture("person_keypoints_sample.json"), &DatasetSpec::coco()).unwrap();
    assert_eq!(ds.images.len(), 3);
    // the crowd region carries no keypoints and is dropped
    assert_eq!(ds.instances.len(), 6);
    assert!(ds.instances.iter().all(|i| i.keypoints.len() == 17 && i.num_labeled() > 0));
    assert_eq!(ds.images[0].file_name, "000000397133.jpg");
}

#[test]
fn generated_instances_round_trip_through_coco_json() {
    let spec = DatasetSpec::synthetic(13).unwrap();
    let images = synth_generate(25, (2, 2), 13, (64, 64), &mut Rng::new(4)).unwrap();
    let instances: Vec<_> = images.iter().flat_map(|i| i.instances.clone()).collect();
    assert_eq!(instances.len(), 50);
    let coco_images: Vec<CocoImage> = images
        .iter()
        .map(|i| CocoImage {
            id: i.id,
            file_name: format!("{}.png", i.id),
            width: 64,
            height: 64,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.json");
    write_coco_json(&path, &to_coco(&coco_images, &instances, &spec)).unwrap();
    let back = load_coco_json(&path, &spec).unwrap();
    assert_eq!(back.images, coco_images);
    assert_eq!(back.instances, instances);
}

fn models() -> Vec<PoseModel<f32>> {
    DecoderKind::TOP_DOWN
        .into_iter()
        .chain([DecoderKind::BottomUpAe])
        .map(|kind| {
            let mut cfg = ModelConfig::preset("tiny_desk").unwrap();
            cfg.decoder.kind = kind;
            PoseModel::new(cfg, &mut Rng::new(kind as u64)).unwrap()
        })
        .collect()
}

#[test]
fn saved_models_predict_exactly_as_before() {
    let dir = tempfile::tempdir().unwrap();
    let x = Tensor::<f32>::randn(&[2, 3, 32, 24], &mut Rng::new(9));
    for (n, m) in models().into_iter().enumerate() {
        let path = dir.path().join(format!("{n}.vpck"));
        save_checkpoint(&path, &Checkpoint::from_model(&m)).unwrap();
        let loaded: PoseModel<f32> = load_checkpoint(&path).unwrap().to_model().unwrap();
        let (a, b) = (m.predict(&x, 0).unwrap(), loaded.predict(&x, 0).unwrap());
        assert_eq!(a, b, "decoder {:?}", m.config().decoder.kind);

        let again = dir.path().join(format!("{n}b.vpck"));
        save_checkpoint(&again, &Checkpoint::from_model(&loaded)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn truncated_files_never_yield_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vpck");
    save_checkpoint(&path, &Checkpoint::from_model(&models()[0])).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in (0..bytes.len()).step_by(997) {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(load_checkpoint(&path).is_err(), "cut at {cut}");
    }
}
