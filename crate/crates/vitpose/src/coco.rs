//! COCO keypoint annotation files and result lists.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vitpose_core::codec::Keypoint;
use vitpose_core::data::{DatasetSpec, PoseInstance};
use vitpose_core::metrics::Instance;

use crate::error::{Error, Result};

/// Category id written for every annotation.
pub const PERSON_CATEGORY: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// Flat `[x, y, v]` triples.
    pub keypoints: Vec<f64>,
    pub num_keypoints: usize,
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
    #[serde(default)]
    pub keypoints: Vec<String>,
    /// One-based keypoint index pairs.
    #[serde(default)]
    pub skeleton: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

/// One entry of a COCO result list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

/// Parsed annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub instances: Vec<PoseInstance>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

fn parse_keypoints(id: u64, flat: &[f64], spec: &DatasetSpec) -> Result<Vec<Keypoint>> {
    let expected = 3 * spec.num_keypoints;
    if flat.len() != expected {
        return Err(Error::Arity {
            annotation_id: id,
            expected,
            found: flat.len(),
        });
    }
    Ok(flat
        .chunks_exact(3)
        .map(|c| Keypoint::new(c[0], c[1], c[2].clamp(0.0, 2.0) as u8))
        .collect())
}

fn flatten(kps: &[Keypoint]) -> Vec<f64> {
    kps.iter().flat_map(|k| [k.x, k.y, k.v as f64]).collect()
}

/// Parses a COCO keypoint annotation file. Annotations without a single
/// labeled keypoint are dropped.
pub fn parse_coco(text: &str, spec: &DatasetSpec) -> Result<CocoDataset> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| Error::json(text, e))?;
    let mut instances = Vec::new();
    for a in &file.annotations {
        let keypoints = parse_keypoints(a.id, &a.keypoints, spec)?;
        let inst = PoseInstance {
            id: a.id,
            image_id: a.image_id,
            task: spec.task_id,
            bbox: a.bbox,
            area: a.area,
            keypoints,
        };
        if inst.num_labeled() > 0 {
            instances.push(inst);
        }
    }
    Ok(CocoDataset {
        images: file.images,
        instances,
    })
}

pub fn load_coco_json(path: impl AsRef<Path>, spec: &DatasetSpec) -> Result<CocoDataset> {
    parse_coco(&read_text(path.as_ref())?, spec)
}

/// Serialises instances as a COCO annotation file with one category built
/// from `spec`.
pub fn to_coco(images: &[CocoImage], instances: &[PoseInstance], spec: &DatasetSpec) -> CocoFile {
    CocoFile {
        images: images.to_vec(),
        annotations: instances
            .iter()
            .map(|i| CocoAnnotation {
                id: i.id,
                image_id: i.image_id,
                category_id: PERSON_CATEGORY,
                keypoints: flatten(&i.keypoints),
                num_keypoints: i.num_labeled(),
                bbox: i.bbox,
                area: i.area,
                iscrowd: 0,
            })
            .collect(),
        categories: vec![CocoCategory {
            id: PERSON_CATEGORY,
            name: spec.name.clone(),
            supercategory: spec.name.clone(),
            keypoints: spec.keypoint_names.clone(),
            skeleton: spec.skeleton.iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
        }],
    }
}

pub fn write_coco_json(path: impl AsRef<Path>, file: &CocoFile) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(file).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(Error::io(path))
}

/// Ground truth for evaluation.
pub fn ground_truth(instances: &[PoseInstance]) -> Vec<Instance> {
    instances
        .iter()
        .map(|i| Instance {
            image_id: i.image_id,
            keypoints: i.keypoints.clone(),
            area: i.area,
            score: 1.0,
        })
        .collect()
}

/// Loads predictions from either a COCO result list or a full annotation
/// file (every annotation then counts as a detection with score 1).
pub fn parse_predictions(text: &str, spec: &DatasetSpec) -> Result<Vec<Instance>> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::json(text, e))?;
    if value.is_array() {
        let results: Vec<CocoResult> = serde_json::from_value(value).map_err(|e| Error::Config(format!("result list: {e}")))?;
        results
            .iter()
            .enumerate()
            .map(|(n, r)| {
                Ok(Instance {
                    image_id: r.image_id,
                    keypoints: parse_keypoints(n as u64, &r.keypoints, spec)?,
                    area: 0.0,
                    score: r.score,
                })
            })
            .collect()
    } else {
        Ok(ground_truth(&parse_coco(text, spec)?.instances))
    }
}

pub fn load_predictions(path: impl AsRef<Path>, spec: &DatasetSpec) -> Result<Vec<Instance>> {
    parse_predictions(&read_text(path.as_ref())?, spec)
}

/// Result list for `predictions`, sorted by image id for stable output.
pub fn to_results(predictions: &[Instance]) -> Vec<CocoResult> {
    let mut by_image: BTreeMap<u64, Vec<&Instance>> = BTreeMap::new();
    for p in predictions {
        by_image.entry(p.image_id).or_default().push(p);
    }
    by_image
        .into_values()
        .flatten()
        .map(|p| CocoResult {
            image_id: p.image_id,
            category_id: PERSON_CATEGORY,
            keypoints: flatten(&p.keypoints),
            score: p.score,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "images": [{"id": 7, "file_name": "a.png", "width": 40, "height": 30}],
        "annotations": [
            {"id": 1, "image_id": 7, "category_id": 1, "num_keypoints": 2,
             "keypoints": [3, 4, 2, 0, 0, 0, 10.5, 12, 1], "bbox": [1, 2, 20, 25], "area": 500},
            {"id": 2, "image_id": 7, "category_id": 1, "num_keypoints": 0,
             "keypoints": [0, 0, 0, 0, 0, 0, 0, 0, 0], "bbox": [0, 0, 5, 5], "area": 25}
        ],
        "categories": [{"id": 1, "name": "person", "keypoints": ["a", "b", "c"], "skeleton": [[1, 2]]}]
    }"#;

    fn spec3() -> DatasetSpec {
        DatasetSpec {
            num_keypoints: 3,
            sigmas: vec![0.05; 3],
            ..DatasetSpec::synthetic(3).unwrap()
        }
    }

    #[test]
    fn minimal_file_yields_one_instance() {
        let d = parse_coco(MINIMAL, &spec3()).unwrap();
        assert_eq!(d.images.len(), 1);
        assert_eq!(d.instances.len(), 1);
        let i = &d.instances[0];
        assert_eq!((i.id, i.image_id, i.bbox, i.area), (1, 7, [1.0, 2.0, 20.0, 25.0], 500.0));
        assert_eq!(i.keypoints[0], Keypoint::new(3.0, 4.0, 2));
        assert!(!i.keypoints[1].labeled());
        assert_eq!(i.keypoints[2], Keypoint::new(10.5, 12.0, 1));
    }

    #[test]
    fn wrong_arity_names_the_annotation() {
        let spec = DatasetSpec {
            num_keypoints: 4,
            sigmas: vec![0.05; 4],
            ..DatasetSpec::synthetic(4).unwrap()
        };
        let e = parse_coco(MINIMAL, &spec).unwrap_err();
        assert!(matches!(e, Error::Arity { annotation_id: 1, expected: 12, found: 9 }), "{e}");
    }

    #[test]
    fn malformed_json_reports_a_byte_offset() {
        let text = "{\"images\": [}";
        let Error::Json { offset, .. } = parse_coco(text, &spec3()).unwrap_err() else { panic!() };
        assert_eq!(offset, 12);
    }

    #[test]
    fn results_and_annotation_files_both_load_as_predictions() {
        let preds = parse_predictions(MINIMAL, &spec3()).unwrap();
        assert_eq!(preds.len(), 1);
        let results = serde_json::to_string(&to_results(&preds)).unwrap();
        let back = parse_predictions(&results, &spec3()).unwrap();
        assert_eq!(back[0].keypoints, preds[0].keypoints);
        assert_eq!(back[0].score, 1.0);
    }
}
