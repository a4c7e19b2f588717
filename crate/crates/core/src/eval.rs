//! TP/FP matching and COCO-style average precision.
//!
//! Conventions: detections are matched per (image, category) in rank
//! order, each to the unmatched non-crowd ground truth with the highest
//! IoU at or above the threshold (ties to the lowest annotation id).
//! Detections left unmatched but covering a crowd region by at least the
//! threshold (intersection over detection area) are ignored, counting as
//! neither TP nor FP. AP averages interpolated precision over 101 recall
//! levels.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{intersection_over_first, iou};
use crate::model::{
    AnnotationId, CategoryId, Dataset, Detection, DetectionId, DetectionSet, GroundTruthObject, ImageId,
};

/// The ten thresholds 0.50, 0.55, ..., 0.95 of the mAP metric.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub const RECALL_LEVELS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Tp,
    Fp,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMatch {
    pub detection_id: DetectionId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub confidence: f64,
    pub label: Label,
    pub matched_gt: Option<AnnotationId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub t_iou: f64,
    /// In detection-set order: by image, then rank order.
    pub detections: Vec<DetectionMatch>,
    pub gt_matched: BTreeMap<AnnotationId, bool>,
}

impl MatchResult {
    pub fn count(&self, label: Label) -> usize {
        self.detections.iter().filter(|d| d.label == label).count()
    }

    pub fn label_index(&self) -> HashMap<DetectionId, Label> {
        self.detections.iter().map(|d| (d.detection_id, d.label)).collect()
    }

    /// CSV with columns `detection_id,image_id,category_id,confidence,tp,t_iou`;
    /// `tp` is 1, 0, or -1 for crowd-ignored detections.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("detection_id,image_id,category_id,confidence,tp,t_iou\n");
        for d in &self.detections {
            let tp = match d.label {
                Label::Tp => 1,
                Label::Fp => 0,
                Label::Ignored => -1,
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                d.detection_id, d.image_id, d.category_id, d.confidence, tp, self.t_iou
            );
        }
        out
    }
}

/// Ground truth indexed by (image, category), non-crowd before crowd,
/// each by ascending id.
struct GtIndex<'a> {
    groups: HashMap<(ImageId, CategoryId), Vec<&'a GroundTruthObject>>,
}

impl<'a> GtIndex<'a> {
    fn new(gt: &'a Dataset) -> Self {
        let mut groups: HashMap<(ImageId, CategoryId), Vec<&GroundTruthObject>> = HashMap::new();
        for g in &gt.ground_truth {
            groups.entry((g.image_id, g.category_id)).or_default().push(g);
        }
        for v in groups.values_mut() {
            v.sort_by_key(|g| (g.is_crowd, g.id));
        }
        Self { groups }
    }

    fn get(&self, image: ImageId, category: CategoryId) -> &[&'a GroundTruthObject] {
        self.groups.get(&(image, category)).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn match_image(dets: &[Detection], gts: &GtIndex<'_>, t_iou: f64) -> (Vec<DetectionMatch>, Vec<AnnotationId>) {
    let mut matched: Vec<AnnotationId> = Vec::new();
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let candidates = gts.get(d.image_id, d.category_id);
        let mut best: Option<(f64, AnnotationId)> = None;
        for g in candidates.iter().filter(|g| !g.is_crowd) {
            if matched.contains(&g.id) {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= t_iou && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, g.id));
            }
        }
        let (label, matched_gt) = match best {
            Some((_, id)) => {
                matched.push(id);
                (Label::Tp, Some(id))
            }
            None => {
                let in_crowd = candidates
                    .iter()
                    .filter(|g| g.is_crowd)
                    .any(|g| intersection_over_first(&d.bbox, &g.bbox) >= t_iou);
                if in_crowd {
                    (Label::Ignored, None)
                } else {
                    (Label::Fp, None)
                }
            }
        };
        out.push(DetectionMatch {
            detection_id: d.id,
            image_id: d.image_id,
            category_id: d.category_id,
            confidence: d.score,
            label,
            matched_gt,
        });
    }
    (out, matched)
}

/// Labels every detection TP, FP or ignored at the IoU threshold.
pub fn match_detections(dets: &DetectionSet, gt: &Dataset, t_iou: f64) -> MatchResult {
    let index = GtIndex::new(gt);
    let groups: Vec<(ImageId, &[Detection])> = dets.groups().collect();
    let per_image: Vec<_> = groups.par_iter().map(|(_, d)| match_image(d, &index, t_iou)).collect();
    let mut gt_matched: BTreeMap<AnnotationId, bool> =
        gt.ground_truth.iter().filter(|g| !g.is_crowd).map(|g| (g.id, false)).collect();
    let mut detections = Vec::with_capacity(dets.len());
    for (matches, matched_ids) in per_image {
        detections.extend(matches);
        for id in matched_ids {
            gt_matched.insert(id, true);
        }
    }
    MatchResult { t_iou, detections, gt_matched }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub tp: usize,
    pub fp: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Precision at recall levels 0.00, 0.01, ..., 1.00.
    pub interpolated: Vec<f64>,
}

impl PrCurve {
    pub fn average_precision(&self) -> f64 {
        self.interpolated.iter().sum::<f64>() / self.interpolated.len() as f64
    }
}

/// Builds the PR curve from (confidence, detection id, is_tp) entries.
pub fn pr_curve(mut ranked: Vec<(f64, DetectionId, bool)>, positives: usize) -> PrCurve {
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut points = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, _, is_tp) in &ranked {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(PrPoint {
            tp,
            fp,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if positives == 0 { 0.0 } else { tp as f64 / positives as f64 },
        });
    }
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let interpolated = (0..RECALL_LEVELS)
        .map(|i| {
            let r = i as f64 / (RECALL_LEVELS - 1) as f64;
            let k = points.partition_point(|p| p.recall < r);
            if positives == 0 || k == points.len() {
                0.0
            } else {
                envelope[k]
            }
        })
        .collect();
    PrCurve { points, interpolated }
}

/// Non-crowd ground-truth counts per category.
pub fn positives_per_category(gt: &Dataset) -> BTreeMap<CategoryId, usize> {
    let mut counts = BTreeMap::new();
    for g in gt.ground_truth.iter().filter(|g| !g.is_crowd) {
        *counts.entry(g.category_id).or_insert(0) += 1;
    }
    counts
}

/// AP of one category; `None` when the category has no ground truth.
pub fn average_precision(matches: &MatchResult, gt: &Dataset, category: CategoryId) -> Option<f64> {
    let positives = positives_per_category(gt).get(&category).copied().unwrap_or(0);
    if positives == 0 {
        return None;
    }
    let ranked = matches
        .detections
        .iter()
        .filter(|d| d.category_id == category && d.label != Label::Ignored)
        .map(|d| (d.confidence, d.detection_id, d.label == Label::Tp))
        .collect();
    Some(pr_curve(ranked, positives).average_precision())
}

/// Mean AP over all categories with ground truth at one threshold.
fn mean_ap(matches: &MatchResult, positives: &BTreeMap<CategoryId, usize>) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let mut by_cat: BTreeMap<CategoryId, Vec<(f64, DetectionId, bool)>> =
        positives.keys().map(|&c| (c, Vec::new())).collect();
    for d in matches.detections.iter().filter(|d| d.label != Label::Ignored) {
        if let Some(v) = by_cat.get_mut(&d.category_id) {
            v.push((d.confidence, d.detection_id, d.label == Label::Tp));
        }
    }
    let total: f64 = by_cat.into_iter().map(|(c, ranked)| pr_curve(ranked, positives[&c]).average_precision()).sum();
    total / positives.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    pub map: f64,
    pub map50: f64,
    /// (threshold, mean AP over categories) pairs.
    pub per_threshold: Vec<(f64, f64)>,
}

/// mAP over thresholds 0.50:0.95 and mAP at 0.50, after capping each image
/// to `cap` detections.
pub fn map_metrics(dets: &DetectionSet, gt: &Dataset, cap: usize) -> MapMetrics {
    let capped = dets.apply_cap(cap);
    let positives = positives_per_category(gt);
    let per_threshold: Vec<(f64, f64)> =
        coco_thresholds().into_iter().map(|t| (t, mean_ap(&match_detections(&capped, gt, t), &positives))).collect();
    let map = per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / per_threshold.len() as f64;
    MapMetrics { map, map50: per_threshold[0].1, per_threshold }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, Category, ImageInfo};

    fn gt_obj(id: u64, bbox: [f64; 4], crowd: bool) -> GroundTruthObject {
        GroundTruthObject {
            id,
            image_id: 1,
            category_id: 1,
            bbox: BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).unwrap(),
            is_crowd: crowd,
        }
    }

    fn dataset(gts: Vec<GroundTruthObject>) -> Dataset {
        Dataset {
            images: vec![ImageInfo { id: 1, width: 100.0, height: 100.0 }],
            ground_truth: gts,
            categories: vec![Category { id: 1, name: "a".into() }, Category { id: 2, name: "b".into() }],
        }
    }

    fn det(id: u64, cat: u64, bbox: [f64; 4], score: f64) -> Detection {
        Detection {
            id,
            image_id: 1,
            category_id: cat,
            bbox: BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).unwrap(),
            score,
        }
    }

    fn set(d: Vec<Detection>) -> DetectionSet {
        DetectionSet::new(d).unwrap()
    }

    #[test]
    fn single_match_is_tp() {
        let gt = dataset(vec![gt_obj(1, [0.0, 0.0, 10.0, 10.0], false)]);
        // IoU 0.6
        let m = match_detections(&set(vec![det(0, 1, [0.0, 0.0, 10.0, 6.0], 0.5)]), &gt, 0.5);
        assert_eq!(m.detections[0].label, Label::Tp);
        assert_eq!(m.detections[0].matched_gt, Some(1));
        assert!(m.gt_matched[&1]);
    }

    #[test]
    fn duplicate_is_fp() {
        let gt = dataset(vec![gt_obj(1, [0.0, 0.0, 10.0, 10.0], false)]);
        let dets = set(vec![det(0, 1, [0.0, 0.0, 10.0, 9.0], 0.8), det(1, 1, [0.0, 0.0, 10.0, 10.0], 0.9)]);
        let m = match_detections(&dets, &gt, 0.5);
        let labels = m.label_index();
        assert_eq!(labels[&1], Label::Tp);
        assert_eq!(labels[&0], Label::Fp);
    }

    #[test]
    fn category_mismatch_is_fp() {
        let gt = dataset(vec![gt_obj(1, [0.0, 0.0, 10.0, 10.0], false)]);
        let m = match_detections(&set(vec![det(0, 2, [0.0, 0.0, 10.0, 9.0], 0.8)]), &gt, 0.5);
        assert_eq!(m.detections[0].label, Label::Fp);
    }

    #[test]
    fn highest_iou_gt_chosen_ties_to_lowest_id() {
        let gt = dataset(vec![
            gt_obj(5, [0.0, 0.0, 10.0, 10.0], false),
            gt_obj(3, [0.0, 0.0, 10.0, 10.0], false),
            gt_obj(4, [0.0, 0.0, 10.0, 8.0], false),
        ]);
        let m = match_detections(&set(vec![det(0, 1, [0.0, 0.0, 10.0, 10.0], 0.8)]), &gt, 0.5);
        assert_eq!(m.detections[0].matched_gt, Some(3));
    }

    #[test]
    fn crowd_absorbs_unmatched() {
        let gt = dataset(vec![gt_obj(1, [0.0, 0.0, 10.0, 10.0], false), gt_obj(2, [20.0, 20.0, 90.0, 90.0], true)]);
        let dets = set(vec![det(0, 1, [0.0, 0.0, 10.0, 10.0], 0.9), det(1, 1, [30.0, 30.0, 40.0, 40.0], 0.8)]);
        let m = match_detections(&dets, &gt, 0.5);
        let labels = m.label_index();
        assert_eq!(labels[&0], Label::Tp);
        assert_eq!(labels[&1], Label::Ignored);
        assert_eq!(m.gt_matched.len(), 1);
    }

    #[test]
    fn ap_fixtures() {
        let gt = dataset(vec![gt_obj(1, [0.0, 0.0, 10.0, 10.0], false)]);
        let tp_only = match_detections(&set(vec![det(0, 1, [0.0, 0.0, 10.0, 10.0], 0.9)]), &gt, 0.5);
        assert_eq!(average_precision(&tp_only, &gt, 1), Some(1.0));
        let fp_first = set(vec![det(0, 1, [50.0, 50.0, 60.0, 60.0], 0.9), det(1, 1, [0.0, 0.0, 10.0, 10.0], 0.8)]);
        let m = match_detections(&fp_first, &gt, 0.5);
        let ap = average_precision(&m, &gt, 1).unwrap();
        assert!((ap - 0.5).abs() < 1e-12, "{ap}");
        let empty = match_detections(&DetectionSet::default(), &gt, 0.5);
        assert_eq!(average_precision(&empty, &gt, 1), Some(0.0));
        assert_eq!(average_precision(&empty, &gt, 2), None);
    }

    #[test]
    fn interpolated_precision_non_increasing() {
        let ranked = vec![(0.9, 0, false), (0.8, 1, true), (0.7, 2, false), (0.6, 3, true), (0.5, 4, true)];
        let c = pr_curve(ranked, 4);
        assert!(c.interpolated.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(c.interpolated.len(), 101);
        for p in &c.points {
            assert_eq!(p.precision * (p.tp + p.fp) as f64, p.tp as f64);
        }
    }

    #[test]
    fn map_perfect_and_jittered() {
        let gt = dataset(vec![gt_obj(1, [0.0, 0.0, 10.0, 10.0], false), gt_obj(2, [50.0, 50.0, 70.0, 60.0], false)]);
        let perfect = set(vec![det(0, 1, [0.0, 0.0, 10.0, 10.0], 1.0), det(1, 1, [50.0, 50.0, 70.0, 60.0], 1.0)]);
        let m = map_metrics(&perfect, &gt, 100);
        assert_eq!((m.map, m.map50), (1.0, 1.0));
        // IoU exactly 0.7 with each GT
        let jittered = set(vec![det(0, 1, [0.0, 0.0, 10.0, 7.0], 0.9), det(1, 1, [50.0, 50.0, 64.0, 60.0], 0.8)]);
        let m = map_metrics(&jittered, &gt, 100);
        assert!((m.map - 0.5).abs() < 1e-12, "{m:?}");
        assert_eq!(m.map50, 1.0);
        let m = map_metrics(&DetectionSet::default(), &gt, 100);
        assert_eq!(m.map, 0.0);
    }

    #[test]
    fn csv_export() {
        let gt = dataset(vec![gt_obj(1, [0.0, 0.0, 10.0, 10.0], false)]);
        let m = match_detections(&set(vec![det(7, 1, [0.0, 0.0, 10.0, 10.0], 0.25)]), &gt, 0.5);
        assert_eq!(m.to_csv(), "detection_id,image_id,category_id,confidence,tp,t_iou\n7,1,1,0.25,1,0.5\n");
    }
}
