//! COCO annotation and results JSON at the ingestion boundary.
//!
//! Boxes arrive as `[x, y, w, h]` and are converted to corner form here.
//! Unknown keys are ignored on read.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{
    BBox, Category, Dataset, Detection, DetectionSet, GroundTruthObject, ImageInfo, ValidationError, ValidationIssue,
};

#[derive(Debug, thiserror::Error)]
pub enum CocoError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

impl CocoError {
    pub fn is_validation(&self) -> bool {
        matches!(self, CocoError::Invalid(_))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default, deserialize_with = "de_crowd")]
    pub iscrowd: u8,
}

fn de_crowd<'de, D: serde::Deserializer<'de>>(d: D) -> Result<u8, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Int(u8),
        Bool(bool),
    }
    Ok(match Flag::deserialize(d)? {
        Flag::Int(v) => v,
        Flag::Bool(b) => b as u8,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoGroundTruth {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One entry of a COCO results array. `id` is our extension; when absent
/// the detection id is the array index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Converts a parsed annotation file, collecting every malformed box and
/// dangling reference, then validates.
pub fn dataset_from_coco(raw: CocoGroundTruth) -> Result<Dataset, ValidationError> {
    let mut issues = Vec::new();
    let mut ground_truth = Vec::with_capacity(raw.annotations.len());
    for a in raw.annotations {
        let [x, y, w, h] = a.bbox;
        match BBox::from_xywh(x, y, w, h) {
            Ok(bbox) => ground_truth.push(GroundTruthObject {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                bbox,
                is_crowd: a.iscrowd != 0,
            }),
            Err(e) => issues.push(ValidationIssue { record: format!("annotation {}", a.id), problem: e.to_string() }),
        }
    }
    let ds = Dataset {
        images: raw.images.into_iter().map(|i| ImageInfo { id: i.id, width: i.width, height: i.height }).collect(),
        ground_truth,
        categories: raw.categories.into_iter().map(|c| Category { id: c.id, name: c.name }).collect(),
    };
    match crate::model::validate_dataset(ds) {
        Ok(ds) if issues.is_empty() => Ok(ds),
        Ok(_) => Err(ValidationError { issues }),
        Err(mut e) => {
            issues.append(&mut e.issues);
            Err(ValidationError { issues })
        }
    }
}

pub fn dataset_to_coco(ds: &Dataset) -> CocoGroundTruth {
    CocoGroundTruth {
        images: ds.images.iter().map(|i| CocoImage { id: i.id, width: i.width, height: i.height }).collect(),
        annotations: ds
            .ground_truth
            .iter()
            .map(|g| CocoAnnotation {
                id: g.id,
                image_id: g.image_id,
                category_id: g.category_id,
                bbox: g.bbox.to_xywh(),
                iscrowd: g.is_crowd as u8,
            })
            .collect(),
        categories: ds.categories.iter().map(|c| CocoCategory { id: c.id, name: c.name.clone() }).collect(),
    }
}

pub fn detections_from_coco(raw: Vec<CocoResult>) -> Result<DetectionSet, ValidationError> {
    let mut issues = Vec::new();
    let mut dets = Vec::with_capacity(raw.len());
    for (index, r) in raw.into_iter().enumerate() {
        let id = r.id.unwrap_or(index as u64);
        let [x, y, w, h] = r.bbox;
        match BBox::from_xywh(x, y, w, h) {
            Ok(bbox) => {
                dets.push(Detection { id, image_id: r.image_id, category_id: r.category_id, bbox, score: r.score })
            }
            Err(e) => issues.push(ValidationIssue { record: format!("detection {id}"), problem: e.to_string() }),
        }
    }
    if !issues.is_empty() {
        return Err(ValidationError { issues });
    }
    DetectionSet::new(dets).map_err(|e| ValidationError {
        issues: vec![ValidationIssue { record: "detections".into(), problem: e.to_string() }],
    })
}

/// Results array in image order, rank order within an image. Ids are kept.
pub fn detections_to_coco(ds: &DetectionSet) -> Vec<CocoResult> {
    ds.iter()
        .map(|d| CocoResult {
            id: Some(d.id),
            image_id: d.image_id,
            category_id: d.category_id,
            bbox: d.bbox.to_xywh(),
            score: d.score,
        })
        .collect()
}

/// Checks that every detection refers to a known image.
pub fn check_detection_images(dets: &DetectionSet, gt: &Dataset) -> Result<(), ValidationError> {
    let known: std::collections::BTreeSet<_> = gt.images.iter().map(|i| i.id).collect();
    let issues: Vec<_> = dets
        .image_ids()
        .filter(|id| !known.contains(id))
        .map(|id| ValidationIssue {
            record: format!("detections on image {id}"),
            problem: "image id not in ground truth".into(),
        })
        .collect();
    if issues.is_empty() {
        Ok(())
    } else {
        Err(ValidationError { issues })
    }
}

fn read(path: &Path) -> Result<String, CocoError> {
    fs::read_to_string(path).map_err(|source| CocoError::Io { path: path.display().to_string(), source })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CocoError> {
    let text = read(path)?;
    let raw: CocoGroundTruth =
        serde_json::from_str(&text).map_err(|source| CocoError::Parse { path: path.display().to_string(), source })?;
    Ok(dataset_from_coco(raw)?)
}

pub fn load_detections(path: &Path) -> Result<DetectionSet, CocoError> {
    let text = read(path)?;
    let raw: Vec<CocoResult> =
        serde_json::from_str(&text).map_err(|source| CocoError::Parse { path: path.display().to_string(), source })?;
    Ok(detections_from_coco(raw)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CocoError> {
    let text = serde_json::to_string(value).expect("COCO structures serialize");
    fs::write(path, text).map_err(|source| CocoError::Io { path: path.display().to_string(), source })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), CocoError> {
    write_json(path, &dataset_to_coco(ds))
}

pub fn save_detections(path: &Path, ds: &DetectionSet) -> Result<(), CocoError> {
    write_json(path, &detections_to_coco(ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GT: &str = r#"{
        "info": {"year": 2017},
        "images": [{"id": 1, "width": 100, "height": 80, "file_name": "a.jpg"}],
        "annotations": [
            {"id": 3, "image_id": 1, "category_id": 2, "bbox": [10, 10, 5, 5], "iscrowd": 0, "area": 25},
            {"id": 4, "image_id": 1, "category_id": 2, "bbox": [90, 70, 20, 20], "iscrowd": 1}
        ],
        "categories": [{"id": 2, "name": "cat", "supercategory": "animal"}]
    }"#;

    #[test]
    fn parses_gt_and_converts_boxes() {
        let raw: CocoGroundTruth = serde_json::from_str(GT).unwrap();
        let ds = dataset_from_coco(raw).unwrap();
        assert_eq!(ds.ground_truth[0].bbox, BBox::new(10.0, 10.0, 15.0, 15.0).unwrap());
        // clamped into the 100x80 image
        assert_eq!(ds.ground_truth[1].bbox, BBox::new(90.0, 70.0, 100.0, 80.0).unwrap());
        assert!(ds.ground_truth[1].is_crowd);
    }

    #[test]
    fn gt_round_trip() {
        let raw: CocoGroundTruth = serde_json::from_str(GT).unwrap();
        let ds = dataset_from_coco(raw).unwrap();
        let again = dataset_from_coco(dataset_to_coco(&ds)).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn results_use_index_ids_and_round_trip() {
        let text = r#"[
            {"image_id": 1, "category_id": 2, "bbox": [0, 0, 4, 4], "score": 0.3},
            {"image_id": 1, "category_id": 2, "bbox": [1, 1, 4, 4], "score": 0.9}
        ]"#;
        let raw: Vec<CocoResult> = serde_json::from_str(text).unwrap();
        let ds = detections_from_coco(raw).unwrap();
        let ids: Vec<_> = ds.iter().map(|d| d.id).collect();
        assert_eq!(ids, vec![1, 0]);
        let again = detections_from_coco(detections_to_coco(&ds)).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn negative_width_rejected() {
        let raw = vec![CocoResult { id: None, image_id: 1, category_id: 1, bbox: [0.0, 0.0, -1.0, 2.0], score: 0.5 }];
        let err = detections_from_coco(raw).unwrap_err();
        assert_eq!(err.issues[0].record, "detection 0");
    }
}
